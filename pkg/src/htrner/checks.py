"""Numerical self-checks shared by ``htrner selftest`` and the test suite.

Each check returns ``(ok, detail)``; implementations under test can be
swapped in through keyword arguments so mutated variants can be shown to fail.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
import torch

from .datasynth import GrammarConfig, generate_record, render_record
from .metrics import align_entities, align_entities_bruteforce, cer
from .posenc import a2dpe, flatten, pe_1d, sinusoid_table
from .training import make_batch, sequence_loss, Sample
from .transformer import HTRNERModel, ModelConfig, causal_mask, param_groups
from .vocab import build_vocab, decode_target, encode_target, Vocab

Check = tuple[bool, str]


def direct_sinusoid(length: int, dim: int) -> np.ndarray:
    out = np.empty((length, dim))
    for p in range(length):
        for i in range(dim // 2):
            phase = p / 10000 ** (2 * i / dim)
            out[p, 2 * i] = math.sin(phase)
            out[p, 2 * i + 1] = math.cos(phase)
    return out


def check_sinusoid(length: int = 64, dim: int = 256, tol: float = 1e-12) -> Check:
    err = float(np.abs(sinusoid_table(length, dim).numpy() - direct_sinusoid(length, dim)).max())
    return err <= tol, f"max |table - direct| = {err:.2e}"


def check_a2dpe_identity(a2dpe_fn: Callable = a2dpe, h: int = 3, w: int = 5, d: int = 8, seed: int = 0) -> Check:
    """Zeroed output weights force both scale factors to sigmoid(0) = 1/2."""
    g = torch.Generator().manual_seed(seed)
    feat = torch.randn(2, h, w, d, generator=g, dtype=torch.float64)
    w1_h, w1_w = (torch.randn(d, d, generator=g, dtype=torch.float64) for _ in range(2))
    zero = torch.zeros(d, 1, dtype=torch.float64)
    out = a2dpe_fn(feat, w1_h, zero, w1_w, zero)
    p_h, p_w = sinusoid_table(h, d), sinusoid_table(w, d)
    expect = feat + 0.5 * (p_h[None, :, None, :] + p_w[None, None, :, :])
    if tuple(out.shape) != tuple(feat.shape):
        return False, f"shape {tuple(out.shape)} != {tuple(feat.shape)}"
    err = float((out - expect).abs().max())
    # halving is exact in binary floating point, so equality is bitwise
    return bool(torch.equal(out, expect)), f"max deviation from E + (P_h + P_w)/2 = {err:.2e}"


def check_pe_shapes() -> Check:
    x = torch.randn(2, 3, 4, 6, dtype=torch.float64)
    w = [torch.randn(6, 6, dtype=torch.float64), torch.randn(6, 1, dtype=torch.float64)] * 2
    ok = a2dpe(x, *w).shape == x.shape and pe_1d(flatten(x)).shape == (2, 12, 6)
    return ok, "a2dpe and pe_1d preserve shape"


def check_vocab_roundtrip(n: int = 100, seed: int = 0) -> Check:
    g = GrammarConfig()
    fails = 0
    for scheme in ("joint", "separate"):
        v = build_vocab(scheme, g.charset, g.categories, g.persons, g.observed_pairs())
        per_tag = 1 if scheme == "joint" else 2
        for i in range(n):
            rec = generate_record(seed + i, g)
            toks = encode_target(rec, v, True)
            back, diag = decode_target(toks, v, rec.id)
            plain = encode_target(rec, v, False)
            if back != rec or diag.total or len(toks) != len(plain) + per_tag * rec.M:
                fails += 1
    return fails == 0, f"{fails} round-trip/token-count failures over {2 * n} records"


def random_entities(rng: np.random.Generator, n: int, categories=("name", "surname", "state"), persons=("wife", "husband")):
    words = ["maria", "marla", "joan", "jon", "puig", "pug", "vidua", "viuda"]
    return [
        (str(rng.choice(words)), str(rng.choice(categories)), str(rng.choice(persons))) for _ in range(n)
    ]


def check_alignment_oracle(trials: int = 200, seed: int = 0, max_entities: int = 6) -> Check:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(trials):
        pred = random_entities(rng, int(rng.integers(0, max_entities + 1)))
        gt = random_entities(rng, int(rng.integers(0, max_entities + 1)))
        for person in (False, True):
            dp = align_entities(pred, gt, person).total
            if not math.isclose(dp, align_entities_bruteforce(pred, gt, person), rel_tol=1e-12, abs_tol=1e-9):
                bad += 1
    cer_ok = cer("abc", "abc") == 0 and cer("marla", "maria") == 0.2 and cer("", "ab") == 1.0
    return bad == 0 and cer_ok, f"{bad} DP/brute-force disagreements; cer examples {'ok' if cer_ok else 'WRONG'}"


def tiny_model(hidden: int = 16, nb_class: int = 40, seed: int = 0, **kw) -> HTRNERModel:
    torch.manual_seed(seed)
    cfg = ModelConfig(
        hidden=hidden, heads=1, layers=2, dropout=0.0, image_h=64, image_w=128,
        backbone_widths=[4, 8, 8, 16, 16], max_len=256, **kw
    )
    return HTRNERModel(cfg, nb_class).double().eval()


def check_causality(mask_fn: Callable = causal_mask, seed: int = 0) -> Check:
    model = tiny_model(seed=seed)
    model.decoder.mask_fn = mask_fn
    g = torch.Generator().manual_seed(seed)
    memory = torch.randn(1, 8, 16, generator=g, dtype=torch.float64)
    tokens = torch.randint(4, 40, (1, 12), generator=g)
    with torch.no_grad():
        base = model.decode(memory, tokens)
        for t in range(1, tokens.shape[1]):
            alt = tokens.clone()
            alt[0, t] = 4 + (alt[0, t] - 3) % 36
            out = model.decode(memory, alt)
            if not torch.equal(out[:, :t], base[:, :t]):
                return False, f"changing token {t} altered earlier logits"
    return True, "logits[0..t-1] independent of token t for every t"


def micro_batch(vocab: Vocab, n: int = 2, h: int = 64, w: int = 128, seed: int = 0):
    g = GrammarConfig(min_lines=1, max_lines=2, min_words_per_line=1, max_words_per_line=2)
    samples = []
    for i in range(n):
        rec = generate_record(seed + i, g)
        samples.append(Sample(rec, render_record(rec, seed + i), rec.L))
    images, tokens = make_batch(samples, vocab, True, h, w)
    return images.double(), tokens


def default_vocab(scheme: str = "joint") -> Vocab:
    g = GrammarConfig()
    return build_vocab(scheme, g.charset, g.categories, g.persons, g.observed_pairs())


GROUP_PREFIXES = {
    "backbone conv": "backbone.",
    "compress conv": "compress.",
    "a2dpe": "a2dpe.",
    "attention": "attn.",
    "embedding": "decoder.embed",
    "projection": "project.",
}


def finite_difference_check(
    per_group: int = 3, eps: float = 1e-5, tol: float = 1e-4, seed: int = 0, hidden: int = 16
) -> tuple[bool, list[dict]]:
    """Central differences vs autograd for sampled entries in every parameter group."""
    vocab = default_vocab()
    model = tiny_model(hidden=hidden, nb_class=vocab.nb_class, seed=seed)
    images, tokens = micro_batch(vocab, seed=seed)

    def loss_value() -> torch.Tensor:
        return sequence_loss(model(images, tokens), tokens, vocab.pad)

    model.zero_grad()
    loss_value().backward()
    rng = np.random.default_rng(seed)
    named = dict(model.named_parameters())
    rows = []
    for group, key in GROUP_PREFIXES.items():
        names = [n for n in named if key in n and named[n].dim() >= 1]
        if group == "attention":
            names = [n for n in names if n.endswith(".weight")]
        elif group == "backbone conv":
            names = [n for n in names if named[n].dim() == 4]
        for name in [names[i] for i in rng.choice(len(names), size=min(per_group, len(names)), replace=False)]:
            p = named[name]
            flat_grad = p.grad.reshape(-1)
            cand = rng.choice(flat_grad.numel(), size=min(16, flat_grad.numel()), replace=False)
            # largest-magnitude candidate keeps the relative error well conditioned
            idx = int(cand[np.argmax(np.abs(flat_grad[cand].numpy()))])
            analytic = float(flat_grad[idx])
            with torch.no_grad():
                flat = p.data.view(-1)
                orig = float(flat[idx])
                flat[idx] = orig + eps
                plus = float(loss_value())
                flat[idx] = orig - eps
                minus = float(loss_value())
                flat[idx] = orig
            numeric = (plus - minus) / (2 * eps)
            denom = max(abs(analytic), abs(numeric), 1e-12)
            rel = abs(analytic - numeric) / denom
            rows.append({"group": group, "param": name, "index": idx, "analytic": analytic, "numeric": numeric, "rel": rel})
    return all(r["rel"] <= tol for r in rows), rows


def check_gradients() -> Check:
    ok, rows = finite_difference_check(per_group=2)
    worst = max(rows, key=lambda r: r["rel"])
    return ok, f"{len(rows)} entries, worst rel. error {worst['rel']:.2e} ({worst['param']})"


def check_shape_law() -> Check:
    for h, w in ((64, 64), (128, 512), (256, 1024)):
        model = tiny_model()
        with torch.no_grad():
            x = torch.zeros(1, 3, h, w, dtype=torch.float64)
            f = model.features(x)
        if tuple(f.shape) != (1, h // 32, w // 32, 16) or flatten(f).shape[1] != (h // 32) * (w // 32):
            return False, f"{h}x{w} -> {tuple(f.shape)}"
    return True, "feature maps are (H/32, W/32, hidden)"


def check_gradient_flow(seed: int = 0) -> Check:
    vocab = default_vocab()
    model = tiny_model(nb_class=vocab.nb_class, seed=seed)
    images, tokens = micro_batch(vocab, seed=seed)
    model.zero_grad()
    sequence_loss(model(images, tokens), tokens, vocab.pad).backward()
    dead = [n for n, p in model.named_parameters() if p.grad is None or float(p.grad.norm()) == 0.0]
    groups = sorted(param_groups(model))
    return not dead, f"groups {groups}; zero-gradient parameters: {dead or 'none'}"


ALL_CHECKS: dict[str, Callable[[], Check]] = {
    "sinusoid table": check_sinusoid,
    "a2dpe identity": check_a2dpe_identity,
    "pe shapes": check_pe_shapes,
    "vocab round-trip": check_vocab_roundtrip,
    "alignment oracle": check_alignment_oracle,
    "causal mask": check_causality,
    "shape law": check_shape_law,
    "gradient flow": check_gradient_flow,
    "finite differences": check_gradients,
}


def run_all(out=print) -> bool:
    ok_all = True
    for name, fn in ALL_CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        ok_all &= ok
        out(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return ok_all

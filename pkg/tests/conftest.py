import math

import numpy as np
import pytest
import torch

from htrner.datasynth import GrammarConfig
from htrner.records import Record, TaggedWord
from htrner.vocab import build_vocab


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def grammar():
    return GrammarConfig()


@pytest.fixture
def joint_vocab(grammar):
    return build_vocab("joint", grammar.charset, grammar.categories, grammar.persons, grammar.observed_pairs())


@pytest.fixture
def separate_vocab(grammar):
    return build_vocab("separate", grammar.charset, grammar.categories, grammar.persons)


def make_record(*lines, rid="r"):
    """Lines of words; a word is either "text" or ("text", category, person)."""
    out = []
    for line in lines:
        out.append([TaggedWord(w) if isinstance(w, str) else TaggedWord(*w) for w in line])
    return Record.from_lines(rid, out)


def central_difference(loss_fn, param, index, eps=1e-6):
    """Numerical d loss / d param.flatten()[index] by central differences."""
    flat = param.data.view(-1)
    orig = float(flat[index])
    with torch.no_grad():
        flat[index] = orig + eps
        plus = float(loss_fn())
        flat[index] = orig - eps
        minus = float(loss_fn())
        flat[index] = orig
    return (plus - minus) / (2 * eps)


def assert_gradient_matches(loss_fn, param, indices, eps=1e-6, tol=1e-4):
    param.grad = None
    loss_fn().backward()
    grad = param.grad.reshape(-1).clone()
    for i in indices:
        numeric = central_difference(loss_fn, param, i, eps)
        analytic = float(grad[i])
        denom = max(abs(numeric), abs(analytic), 1e-8)
        assert abs(numeric - analytic) / denom <= tol, (i, analytic, numeric)


def tiny_model_config(**kw):
    from htrner.transformer import ModelConfig

    base = dict(hidden=16, heads=1, layers=1, dropout=0.1, max_len=200, image_h=64, image_w=128,
                backbone_widths=[4, 8, 8, 16, 16])
    base.update(kw)
    return ModelConfig(**base)


def tiny_items(n=4, seed=0, min_lines=2, max_lines=3):
    from htrner.datasynth import GrammarConfig, generate_record, render_record

    g = GrammarConfig(min_lines=min_lines, max_lines=max_lines, min_words_per_line=1, max_words_per_line=2)
    out = []
    for i in range(n):
        rec = generate_record(seed + i, g, f"t{i}")
        out.append((rec, render_record(rec, seed + i)))
    return out


def np_linear(lin, x):
    return x @ lin.weight.detach().numpy().T + lin.bias.detach().numpy()


def loop_attention(attn, x, divisor):
    """softmax(q_i . K^T / divisor) V for every query row, one row at a time."""
    q, k, v = np_linear(attn.q, x), np_linear(attn.k, x), np_linear(attn.v, x)
    rows = []
    for i in range(x.shape[0]):
        scores = [float(np.dot(q[i], k[j])) / divisor for j in range(x.shape[0])]
        top = max(scores)
        e = [math.exp(s - top) for s in scores]
        z = math.fsum(e)
        rows.append(sum((e[j] / z) * v[j] for j in range(x.shape[0])))
    return np_linear(attn.out, np.stack(rows))


def np_layer_norm(ln, x):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + ln.eps) * ln.weight.detach().numpy() + ln.bias.detach().numpy()


def np_encoder_layer(layer, x, divisor):
    h = x + loop_attention(layer.attn, np_layer_norm(layer.norm1, x), divisor)
    inner = np.maximum(np_linear(layer.ff[0], np_layer_norm(layer.norm2, h)), 0.0)
    return h + np_linear(layer.ff[3], inner)


def np_encoder(enc, x, divisor):
    for layer in enc.layers:
        x = np_encoder_layer(layer, x, divisor)
    return np_layer_norm(enc.norm, x)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

import math

import pytest
import torch

from htrner.checkpoint import load_checkpoint
from htrner.training import (
    MIXED,
    PARAGRAPH,
    ScenarioConfig,
    Trainer,
    TrainingDiverged,
    batch_indices,
    level_corpus,
    lr_at,
    make_batch,
    pad_tokens,
    plan_phases,
    run_curriculum,
    run_one_stage,
    sequence_loss,
    train,
)
from htrner.transformer import HTRNERModel
from htrner.vocab import encode_target

from conftest import assert_gradient_matches, tiny_items, tiny_model_config


def fresh_model(vocab, seed=0, **kw):
    torch.manual_seed(seed)
    return HTRNERModel(tiny_model_config(**kw), vocab.nb_class)


def test_uniform_logits_loss_is_log_classes():
    targets = torch.randint(0, 45, (2, 6))
    targets[:, 0] = 1
    targets[targets == 0] = 5
    loss = sequence_loss(torch.zeros(2, 5, 45), targets, pad=0)
    assert abs(float(loss) - math.log(45)) < 1e-6
    assert abs(math.log(45) - 3.8067) < 1e-4


def test_confident_correct_logits_give_near_zero_loss():
    targets = torch.tensor([[1, 7, 8, 9, 3]])
    logits = torch.full((1, 4, 20), -50.0)
    logits[0, torch.arange(4), targets[0, 1:]] = 50.0
    assert float(sequence_loss(logits, targets)) < 1e-30


def test_padding_is_excluded_from_loss():
    logits = torch.randn(1, 5, 10, dtype=torch.float64)
    short = torch.tensor([[1, 4, 5, 3]])
    padded = torch.tensor([[1, 4, 5, 3, 0, 0]])
    assert torch.allclose(sequence_loss(logits[:, :3], short), sequence_loss(logits, padded))


def test_loss_gradient_matches_finite_difference():
    logits = torch.randn(2, 5, 12, dtype=torch.float64, requires_grad=True)
    targets = torch.randint(1, 12, (2, 6))

    def loss():
        return sequence_loss(logits, targets)

    assert_gradient_matches(loss, logits, range(0, logits.numel(), 7))


def test_loss_length_mismatch():
    with pytest.raises(ValueError):
        sequence_loss(torch.zeros(1, 4, 10), torch.zeros(1, 4, dtype=torch.long))


def test_pad_tokens():
    assert pad_tokens([[1, 2, 3], [1, 3]]).tolist() == [[1, 2, 3], [1, 3, 0]]


def test_phase_plans():
    def plan(**kw):
        return [(p.level, p.include_tags) for p in plan_phases(ScenarioConfig(**kw))]

    assert plan(scenario="one_stage") == [(PARAGRAPH, True)]
    assert plan(scenario="two_stage") == [(PARAGRAPH, False), (PARAGRAPH, True)]
    assert plan(scenario="mixed_level") == [(MIXED, True)]
    assert plan(scenario="two_stage_mixed") == [(MIXED, False), (MIXED, True)]
    assert plan(scenario="curriculum_sequential", schedule=[1, PARAGRAPH]) == [
        (1, False), (PARAGRAPH, False), (PARAGRAPH, True)
    ]
    dual = plan(scenario="curriculum_dual", schedule=[1, 2, PARAGRAPH])
    assert len(dual) == 6
    assert dual == [(1, False), (1, True), (2, False), (2, True), (PARAGRAPH, False), (PARAGRAPH, True)]


def test_invalid_scenarios_and_schedules():
    for bad in (
        dict(scenario="three_stage"),
        dict(scenario="curriculum_dual", schedule=[2, 1]),
        dict(scenario="curriculum_sequential", schedule=[]),
        dict(scenario="curriculum_sequential", schedule=[0]),
        dict(steps=0),
    ):
        with pytest.raises(ValueError):
            ScenarioConfig(**bad).validate()


def test_block_counts():
    items = tiny_items(3, min_lines=4, max_lines=4)
    assert len(level_corpus(items, MIXED)) == 3 * 10
    assert len(level_corpus(items, 1)) == 12
    assert len(level_corpus(items, 3)) == 6
    assert len(level_corpus(items, PARAGRAPH)) == 3
    with pytest.raises(ValueError):
        level_corpus(items, 5)


def test_mixed_batches_mix_block_sizes():
    corpus = level_corpus(tiny_items(6, min_lines=2, max_lines=4), MIXED)
    ks = [s.k for s in corpus]
    mixed = sum(len({ks[i] for i in batch_indices(len(corpus), 8, 0, 0, step)}) >= 2 for step in range(100))
    assert mixed >= 95


def test_batch_indices_cover_each_epoch():
    n = 13
    seen = [i for step in range(13) for i in batch_indices(n, 4, 7, 1, step)]
    for epoch in range(4):
        assert sorted(seen[epoch * n : (epoch + 1) * n]) == list(range(n))
    assert batch_indices(n, 4, 7, 1, 5) == batch_indices(n, 4, 7, 1, 5)
    assert batch_indices(n, 4, 7, 1, 5) != batch_indices(n, 4, 8, 1, 5)


def test_lr_schedule():
    assert lr_at(0, 1.0, 4) == 0.25
    assert lr_at(3, 1.0, 4) == 1.0
    assert lr_at(15, 1.0, 4) == 0.5
    assert lr_at(9, 2.0, 0) == 2.0


def test_make_batch_shapes(joint_vocab):
    samples = level_corpus(tiny_items(3), PARAGRAPH)
    images, tokens = make_batch(samples, joint_vocab, True, 64, 128)
    assert images.shape == (3, 3, 64, 128)
    lengths = [len(encode_target(s.record, joint_vocab)) for s in samples]
    assert tokens.shape == (3, max(lengths))


def test_smoothed_loss_decreases_over_100_steps(joint_vocab):
    items = tiny_items(4)
    cfg = ScenarioConfig(steps=100, lr=3e-3, warmup=10, batch_size=4, seed=0)
    result = run_one_stage(fresh_model(joint_vocab, dropout=0.0), joint_vocab, items, cfg)
    losses = [l for _, _, l in result.loss_trace]
    assert len(losses) == 100
    assert sum(losses[-20:]) / 20 < sum(losses[:20]) / 20


def test_same_seed_gives_identical_trace(joint_vocab):
    items = tiny_items(3)
    cfg = ScenarioConfig(scenario="two_stage", steps=6, warmup=2, batch_size=2, seed=3)
    a = train(fresh_model(joint_vocab), joint_vocab, items, cfg)
    b = train(fresh_model(joint_vocab), joint_vocab, items, cfg)
    assert a.loss_trace == b.loss_trace
    assert all(torch.equal(x, y) for x, y in zip(a.checkpoint.build_model().state_dict().values(),
                                                 b.checkpoint.build_model().state_dict().values()))


def test_resume_mid_second_phase_matches_uninterrupted(joint_vocab, tmp_path):
    items = tiny_items(3)
    cfg = ScenarioConfig(scenario="two_stage", steps=6, warmup=2, batch_size=2, seed=1, checkpoint_every=3)
    full = train(fresh_model(joint_vocab), joint_vocab, items, cfg, tmp_path / "full")

    mid = load_checkpoint(tmp_path / "full" / "step-p1-000003.ckpt")
    first = load_checkpoint(tmp_path / "full" / "step-p0-000003.ckpt")
    assert mid.cursor["phase"] == 1 and first.cursor["phase"] == 0
    assert mid.cursor["step"] == 3

    resumed = Trainer(mid.build_model(), joint_vocab, cfg, items, tmp_path / "resumed").run(mid)
    assert resumed.loss_trace == full.loss_trace
    assert [p["phase"] for p in resumed.phase_log] == [0, 1]
    full_bytes = (tmp_path / "full" / "model.ckpt").read_bytes()
    assert (tmp_path / "resumed" / "model.ckpt").read_bytes() == full_bytes


def test_run_outputs_and_phase_log(joint_vocab, tmp_path):
    items = tiny_items(3)
    cfg = ScenarioConfig(scenario="curriculum_sequential", steps=2, batch_size=2, schedule=[1, PARAGRAPH])
    seen = []
    result = train(fresh_model(joint_vocab), joint_vocab, items, cfg, tmp_path,
                   on_phase_end=lambda phase, model: seen.append(phase.index))
    assert seen == [0, 1, 2]
    assert [(p["level"], p["include_tags"]) for p in result.phase_log] == [
        (1, False), (PARAGRAPH, False), (PARAGRAPH, True)
    ]
    assert (tmp_path / "loss.csv").read_text().splitlines()[0] == "step,phase,loss"
    assert len((tmp_path / "loss.csv").read_text().splitlines()) == 7
    assert load_checkpoint(tmp_path / "model.ckpt").cursor["done"] is True


def test_curriculum_mode_check(joint_vocab):
    with pytest.raises(ValueError):
        run_curriculum(fresh_model(joint_vocab), joint_vocab, tiny_items(2), ScenarioConfig(), mode="spiral")


def test_divergence_aborts_with_diagnostic(joint_vocab):
    model = fresh_model(joint_vocab)
    with torch.no_grad():
        model.project.bias.fill_(float("nan"))
    cfg = ScenarioConfig(scenario="two_stage", steps=3, batch_size=2)
    with pytest.raises(TrainingDiverged, match="phase 0.*step 0"):
        train(model, joint_vocab, tiny_items(2), cfg)

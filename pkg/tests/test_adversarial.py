import numpy as np
import pytest
import torch
from torch import nn

from oracles import central_difference_check, standard_error
from pnpseg.adversarial import (DEFAULT_TAPS, AdaptConfig, Critic, TapPlan, adapt, aggregate_features,
                                build_critics, clip_params, critic_f, critic_m, loss_critic, loss_critic_f,
                                loss_generator, lr_at, read_history_csv, write_history_csv)
from pnpseg.data import SliceDataset
from pnpseg.errors import ArgumentError, ConfigurationError, TapLookupError, TargetLabelAccessError
from pnpseg.pnp import freeze, init_dam, route
from pnpseg.segnet import NetworkConfig, build_segmenter

CFG = NetworkConfig(input_size=16, num_classes=3, base_width=2, dropout_rate=0.0)


class SentinelDataset:
    """Target data whose labels must never be touched."""

    def __init__(self, images):
        self.images = images
        self.label_reads = 0

    def __len__(self):
        return len(self.images)

    @property
    def labels(self):
        self.label_reads += 1
        raise AssertionError("target labels were read")


def _fast_cfg(**kw):
    base = dict(critic_pretrain_iters=3, joint_updates=4, n_critic=2, batch_size=2, critic_width=4,
                log_every=0)
    return AdaptConfig(**{**base, **kw})


def _setup(seed=0, depth="RM6", cfg=None):
    cfg = cfg or _fast_cfg()
    model = freeze(build_segmenter(CFG, seed))
    dam = init_dam(model, depth)
    critics = build_critics(CFG, cfg.tap_plan(CFG), seed, cfg.critic_width, cfg.use_mask_critic, cfg.clip_bound)
    g = torch.Generator().manual_seed(seed)
    src = SliceDataset(torch.randn(8, 3, 16, 16, generator=g), torch.zeros(8, 16, 16, dtype=torch.long))
    tgt = SentinelDataset(torch.randn(8, 3, 16, 16, generator=g) * 2 + 1)
    return model, dam, critics, src, tgt, cfg


# ---------------------------------------------------------------- features and critics

def test_aggregate_shapes():
    acts = {"RM4": torch.randn(2, 16, 64, 64), "RM6": torch.randn(2, 32, 32, 32)}
    out = aggregate_features(acts, TapPlan(("RM4", "RM6"), 32))
    assert out.shape == (2, 48, 32, 32)


def test_aggregate_identity_and_order():
    a, b = torch.randn(1, 4, 8, 8), torch.randn(1, 2, 8, 8)
    acts = {"RM4": a, "RM6": b}
    ab = aggregate_features(acts, TapPlan(("RM4", "RM6"), 8))
    ba = aggregate_features(acts, TapPlan(("RM6", "RM4"), 8))
    assert torch.equal(ab[:, :4], a) and torch.equal(ab[:, 4:], b)
    assert torch.equal(ba[:, :2], b) and torch.equal(ba[:, 2:], a)
    with pytest.raises(TapLookupError):
        aggregate_features(acts, TapPlan(("Conv10",), 8))


def test_tap_plan_validation():
    TapPlan(DEFAULT_TAPS, 4).validate("RM6")
    TapPlan(("RM6", "Conv10"), 4).validate("RM6")          # pre-softmax removal is allowed
    with pytest.raises(ConfigurationError):
        TapPlan(("Conv10", "pre-softmax"), 4).validate("RM6")   # nothing from the DAM
    with pytest.raises(ConfigurationError):
        TapPlan(("RM4", "RM6"), 4).validate("RM6")              # nothing from the frozen layers
    with pytest.raises(ConfigurationError):
        TapPlan(("RM4", "RM4", "Conv10"), 4).validate("RM6")


def test_zero_critic_scores_zero():
    c = Critic(5, 3, width=4)
    with torch.no_grad():
        for p in c.parameters():
            p.zero_()
    assert torch.equal(c(torch.randn(6, 5, 16, 16)), torch.zeros(6))


def test_critic_structure_and_batch_mapping():
    plan = TapPlan(DEFAULT_TAPS, 4)
    pair = build_critics(CFG, plan, 0, width=4)
    feats = torch.randn(6, plan.channels(CFG), 4, 4)
    assert critic_f(pair, feats).shape == (6,)
    probs = torch.softmax(torch.randn(6, CFG.num_classes, 16, 16), 1)
    assert critic_m(pair, probs).shape == (6,)
    for critic in (pair.feature_critic, pair.mask_critic):
        mods = list(critic.modules())
        assert any(isinstance(m, nn.LeakyReLU) and m.negative_slope == 0.2 for m in mods)
        convs = [m for m in mods if isinstance(m, nn.Conv2d)]
        assert convs and all(m.stride == (2, 2) for m in convs)
        assert not any(isinstance(m, nn.BatchNorm2d) for m in mods)
    # mask critic reads C-channel probabilities; feature critic is the deeper one
    assert [m for m in pair.mask_critic.modules() if isinstance(m, nn.Conv2d)][0].in_channels == CFG.num_classes
    n_conv = lambda c: sum(isinstance(m, nn.Conv2d) for m in c.modules())
    assert n_conv(pair.feature_critic) > n_conv(pair.mask_critic)
    assert pair.max_abs() <= 0.03


def test_mask_critic_can_be_disabled():
    pair = build_critics(CFG, TapPlan(DEFAULT_TAPS, 4), 0, width=4, use_mask_critic=False)
    assert pair.mask_critic is None
    with pytest.raises(ConfigurationError):
        critic_m(pair, torch.zeros(1, 3, 16, 16))


# ---------------------------------------------------------------- losses

def test_generator_loss_examples():
    f, m = torch.tensor([-1.0, 1.0], dtype=torch.float64), torch.tensor([2.0], dtype=torch.float64)
    assert float(loss_generator(f, m, 0.1, 1.0)) == pytest.approx(-0.2, abs=1e-12)
    assert float(loss_generator(torch.zeros(3), torch.zeros(3), 0.1, 0.002)) == 0.0
    f = torch.randn(5)
    assert torch.equal(loss_generator(f, torch.randn(5), 0.0, 0.002), loss_generator(f, None, 0.0, 0.002))


def test_critic_loss_examples():
    assert float(loss_critic(torch.tensor([1.0, 3.0]), torch.tensor([2.0, 2.0]), 1.0)) == 0.0
    c = torch.full((4,), 3.7)
    assert float(loss_critic_f(c, c, 0.002)) == 0.0
    t, s = torch.randn(6), torch.randn(6)
    assert float(loss_critic(-t, -s, 0.002)) == pytest.approx(-float(loss_critic(t, s, 0.002)), abs=1e-12)
    with pytest.raises(ArgumentError):
        loss_critic(torch.zeros(0), torch.zeros(2), 1.0)


def test_clip_params():
    p = torch.tensor([0.05, -0.1, 0.01])
    assert clip_params([p], 0.03) == pytest.approx(0.03)
    assert torch.allclose(p, torch.tensor([0.03, -0.03, 0.01]))
    with pytest.raises(ArgumentError):
        clip_params([p], 0.0)


def test_lr_schedule():
    cfg = AdaptConfig()
    assert lr_at(cfg, 1) == 3e-4
    assert lr_at(cfg, 99) == 3e-4
    assert abs(lr_at(cfg, 100) - 2.94e-4) <= 1e-12
    assert abs(lr_at(cfg, 200) - 3e-4 * 0.98 ** 2) <= 1e-12


def test_generator_gradient_finite_difference():
    cfg = NetworkConfig(input_size=8, in_channels=1, num_classes=2, base_width=1, max_width=2, dropout_rate=0.0)
    model = freeze(build_segmenter(cfg, 0).double())
    dam = init_dam(model, "RM2").double()
    from test_segnet import jitter_batchnorm
    jitter_batchnorm(dam, 1)
    assert sum(p.numel() for p in dam.parameters()) <= 1000
    plan = TapPlan(("RM2", "Conv10", "pre-softmax"), 4)
    pair = build_critics(cfg, plan, 0, width=4)
    for c in pair.modules():
        c.double()
        with torch.no_grad():   # larger weights than the clip bound keep the scores well above roundoff
            for p in c.parameters():
                p.mul_(20)
        c.requires_grad_(False)
    x = torch.randn(3, 1, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(2))

    def fn():
        probs, acts = route("target", model, dam, x, set(plan.feature_taps))
        return loss_generator(critic_f(pair, aggregate_features(acts, plan)), critic_m(pair, probs), 0.1, 1.0)

    assert central_difference_check(fn, list(dam.parameters()), h=1e-4) <= 1e-4


# ---------------------------------------------------------------- adapt

def test_adapt_zero_iterations_is_noop():
    model, dam, critics, src, tgt, _ = _setup()
    ref = init_dam(model, "RM6")
    dam, _, hist = adapt(model, dam, critics, src, tgt, _fast_cfg(critic_pretrain_iters=0, joint_updates=0))
    assert hist == []
    for k, v in dam.state_dict().items():
        assert torch.equal(v, ref.state_dict()[k])


def test_adapt_history_schedule_and_clip():
    cfg = _fast_cfg(critic_pretrain_iters=3, joint_updates=5, n_critic=3, decay_every=2)
    model, dam, critics, src, tgt, _ = _setup(cfg=cfg)
    _, critics, hist = adapt(model, dam, critics, src, tgt, cfg)
    roles = [r["role"] for r in hist]
    assert roles[:3] == ["critic"] * 3 and all(r["phase"] == "pretrain" for r in hist[:3])
    joint = roles[3:]
    assert joint == (["critic"] * 3 + ["generator"]) * 5
    gens = [r for r in hist if r["role"] == "generator"]
    for k, r in enumerate(gens, 1):
        assert abs(r["lr"] - cfg.lr * cfg.decay ** (k // 2)) <= 1e-12
    for r in hist:
        if r["role"] == "critic":
            assert r["clip_violations"] == 0 and r["max_abs_param"] <= cfg.clip_bound
    assert critics.max_abs() <= cfg.clip_bound
    assert [r["iteration"] for r in hist] == list(range(1, len(hist) + 1))


def test_adapt_never_reads_target_labels():
    model, dam, critics, src, tgt, cfg = _setup()
    adapt(model, dam, critics, src, tgt, cfg)
    assert tgt.label_reads == 0

    class Leaky(SentinelDataset):
        def __getattr__(self, name):   # a dataset exposing labels under other names
            raise AssertionError(name)

    view_probe = SliceDataset(tgt.images, torch.zeros(8, 16, 16, dtype=torch.long)).unlabelled()
    with pytest.raises(TargetLabelAccessError):
        view_probe.labels
    model, dam, critics, src, _, cfg = _setup()
    adapt(model, dam, critics, src, view_probe, cfg)


def test_adapt_is_deterministic():
    runs = []
    for _ in range(2):
        model, dam, critics, src, tgt, cfg = _setup(seed=3)
        dam, _, hist = adapt(model, dam, critics, src, tgt, cfg, seed=3)
        runs.append((hist, dam.state_dict()))
    assert runs[0][0] == runs[1][0]
    for k, v in runs[0][1].items():
        assert torch.equal(v, runs[1][1][k])


def test_adapt_config_checks():
    with pytest.raises(ConfigurationError):
        AdaptConfig(n_critic=0)
    with pytest.raises(ConfigurationError):
        AdaptConfig(clip_bound=0)
    model, dam, critics, src, tgt, _ = _setup()
    with pytest.raises(ConfigurationError):
        adapt(model, dam, critics, src, tgt, _fast_cfg(use_mask_critic=False))
    assert AdaptConfig.from_dict(AdaptConfig(mask_ratio=0.3).to_dict()) == AdaptConfig(mask_ratio=0.3)


def test_history_csv_round_trip(tmp_path):
    model, dam, critics, src, tgt, cfg = _setup()
    _, _, hist = adapt(model, dam, critics, src, tgt, cfg)
    path = write_history_csv(hist, tmp_path / "h.csv")
    assert read_history_csv(path) == hist


def test_critic_loss_centred_under_null_hypothesis():
    """Same input distribution on both routes and a DAM equal to the source
    encoder: a fixed critic's loss estimates average to zero."""
    model = freeze(build_segmenter(CFG, 0))
    dam = init_dam(model, "RM6")
    plan = TapPlan(DEFAULT_TAPS, 4)
    pair = build_critics(CFG, plan, 0, width=4)
    g = torch.Generator().manual_seed(0)
    pool = torch.randn(256, 3, 16, 16, generator=g)
    rng = np.random.default_rng(0)
    taps = set(plan.feature_taps)
    with torch.no_grad():
        _, a_all = route("source", model, None, pool, taps)
        feats_s = aggregate_features(a_all, plan)
        _, a_all_t = route("target", model, dam, pool, taps)
        feats_t = aggregate_features(a_all_t, plan)
        scores_s, scores_t = critic_f(pair, feats_s), critic_f(pair, feats_t)
    losses = []
    for _ in range(1000):
        i, j = rng.integers(0, 256, 6), rng.integers(0, 256, 6)
        losses.append(float(loss_critic(scores_t[i], scores_s[j], 0.002)))
    assert abs(np.mean(losses)) < 3 * standard_error(losses)

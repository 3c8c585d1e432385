"""Config parsing, optimizers, loss terms, stage loops, checkpoints."""
import json
import math

import numpy as np
import pytest

from paalign.data import DataError, ShiftSpec, gen_synthetic_pair, protocol_splits
from paalign.graph import Graph
from paalign.trainer import (
    CHECKPOINT_MAGIC,
    ConfigError,
    NumericError,
    PaaConfig,
    Trainer,
    TrainerError,
    build_pairs,
    config_hash,
    config_text,
    grl_coefficient,
    l_adv,
    l_ral,
    load_checkpoint,
    parse_config,
    resume_trainer,
    save_checkpoint,
    validate_config,
)


@pytest.fixture(scope="module")
def fold():
    src, tgt = gen_synthetic_pair(
        1, 8, 3, 300, 300,
        ShiftSpec(mean_shift=1.0, rotation_angle=0.5, noise_scale=0.3),
    )
    return protocol_splits(src, tgt, 1)[0]


def small_cfg(**kw):
    base = dict(epochs=2, batch=64, hidden=32, embed_dim=16, disc_hidden=8,
                seed=3)
    base.update(kw)
    return validate_config(PaaConfig(**base))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def test_parse_config_round_trip():
    cfg = small_cfg(variant="M", lambda1=0.25)
    text = config_text(cfg)
    again = parse_config(text)
    assert again == cfg
    assert config_hash(again) == config_hash(cfg)


def test_parse_config_comments_and_defaults():
    cfg = parse_config("# a comment\nvariant = C\nlr = 2e-3  # inline\n\n")
    assert cfg.variant == "C"
    assert cfg.lr == 2e-3
    assert cfg.epochs == 300
    assert cfg.lambda1 == 0.5 and cfg.lambda2 == 1.5
    assert cfg.lambda3 == 0.0  # gated off for C
    assert cfg.opt_heads == "rmsprop"


def test_parse_config_errors():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("verbosity = 3")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config("lr = 1e-3\nlr = 1e-4")
    with pytest.raises(ConfigError, match="bad value"):
        parse_config("epochs = many")
    with pytest.raises(ConfigError, match="expected key"):
        parse_config("just some words")
    with pytest.raises(ConfigError, match="true or false"):
        parse_config("z_score = yes")


def test_variant_gating():
    cfg = validate_config(PaaConfig(variant="L"))
    assert cfg.lambda2 == 0.0 and cfg.lambda3 == 0.0
    cfg = validate_config(PaaConfig(variant="C"))
    assert cfg.lambda2 == 1.5 and cfg.lambda3 == 0.0
    cfg = validate_config(PaaConfig(variant="M"))
    assert cfg.lambda2 == 1.5 and cfg.lambda3 == 1.0
    assert cfg.opt_heads == "adam"
    assert validate_config(PaaConfig(variant="L")).opt_heads == "rmsprop"

    with pytest.raises(ConfigError, match="lambda2"):
        validate_config(
            PaaConfig(variant="L", lambda2=1.0), explicit=["lambda2"]
        )
    with pytest.raises(ConfigError, match="lambda3"):
        validate_config(
            PaaConfig(variant="C", lambda3=0.5), explicit=["lambda3"]
        )
    # inherited defaults are silently gated, not an error
    validate_config(PaaConfig(variant="L", lambda2=1.5))


def test_config_validation_ranges():
    for bad in (
        dict(variant="X"),
        dict(lr=0.0),
        dict(batch=1),
        dict(momentum_proto=1.0),
        dict(conf_threshold=0.0),
        dict(conf_threshold=-0.5),
        dict(conf_threshold=float("inf")),
        dict(grl_gamma=0.0),
        dict(epochs=-1),
        dict(lambda1=-0.1),
        dict(opt_extractor="sgd"),
        dict(ablation="no-everything"),
    ):
        with pytest.raises(ConfigError):
            validate_config(PaaConfig(**bad))
    # a threshold above any reachable probability disables pseudo-labels
    assert validate_config(PaaConfig(conf_threshold=1.5)).conf_threshold == 1.5


def test_stage_ablations_require_variant_m():
    with pytest.raises(ConfigError, match="variant M"):
        validate_config(PaaConfig(variant="L", ablation="no-stage2"))
    cfg = validate_config(PaaConfig(variant="M", ablation="no_stage23"))
    assert cfg.ablation == "no-stage23"
    assert validate_config(PaaConfig(ablation="FULL")).ablation == "none"


def test_config_hash_sensitivity():
    a = config_hash(small_cfg())
    b = config_hash(small_cfg(seed=4))
    assert a != b
    assert len(a) == 64


# ---------------------------------------------------------------------------
# loss building blocks
# ---------------------------------------------------------------------------


def test_grl_coefficient_endpoints():
    assert grl_coefficient(0.0, 10.0) == 0.0
    assert grl_coefficient(1.0, 10.0) == pytest.approx(
        2.0 / (1.0 + math.exp(-10.0)) - 1.0, abs=1e-15
    )
    values = [grl_coefficient(p, 10.0) for p in np.linspace(0, 1, 11)]
    assert values == sorted(values)
    assert grl_coefficient(-0.5, 10.0) == 0.0  # clamped progress


def test_build_pairs_hand_example():
    mu, mask = build_pairs(
        np.array([0, 1]), np.array([1]), np.array([True])
    )
    assert mask.shape == (3, 3)
    assert mask.sum() == 6  # all ordered off-diagonal pairs
    assert mu[1, 2] == 1.0 and mu[0, 2] == 0.0 and mu[0, 1] == 0.0
    assert np.array_equal(mu, mu.T) and np.array_equal(mask, mask.T)

    mu2, mask2 = build_pairs(
        np.array([0, 1]), np.array([1]), np.array([False])
    )
    assert mask2.sum() == 2  # only the source-source pair survives
    assert mask2[0, 1] == 1.0 and mask2[2, :].sum() == 0.0

    _, mask3 = build_pairs(
        np.array([0, 1]), np.array([1]), np.array([True]),
        drop_source_pairs=True,
    )
    assert mask3.sum() == 4
    assert mask3[0, 1] == 0.0 and mask3[0, 2] == 1.0


def test_l_ral_two_heads_average():
    rng = np.random.default_rng(0)
    phi_a, phi_b = rng.uniform(-1, 1, (4, 4)), rng.uniform(-1, 1, (4, 4))
    mu = (rng.random((4, 4)) < 0.5).astype(float)
    mask = np.ones((4, 4)) - np.eye(4)
    g = Graph()
    pa, pb = g.tensor(phi_a), g.tensor(phi_b)
    solo_a = float(l_ral(g, [pa], mu, mask).value[0, 0])
    solo_b = float(l_ral(g, [pb], mu, mask).value[0, 0])
    both = float(l_ral(g, [pa, pb], mu, mask).value[0, 0])
    assert both == pytest.approx((solo_a + solo_b) / 2.0, abs=1e-12)
    with pytest.raises(TrainerError, match="pair"):
        l_ral(g, [pa], mu, np.zeros((4, 4)))


def test_l_adv_hand_values():
    g = Graph()
    half = g.tensor(np.full((3, 1), 0.5))
    node = l_adv(g, half, half)
    assert float(node.value[0, 0]) == pytest.approx(2.0 * math.log(2.0), abs=1e-12)

    g2 = Graph()
    node2 = l_adv(
        g2, g2.tensor(np.array([[0.9]])), g2.tensor(np.array([[0.2]]))
    )
    want = -math.log(0.9) - math.log(0.8)
    assert float(node2.value[0, 0]) == pytest.approx(want, abs=1e-12)


def test_l_adv_saturated_probabilities_stay_finite():
    g = Graph()
    ones = g.tensor(np.ones((2, 1)))
    zeros = g.tensor(np.zeros((2, 1)))
    node = l_adv(g, zeros, ones)  # worst case for both clamps
    assert np.isfinite(node.value[0, 0])
    g.backward(node)


# ---------------------------------------------------------------------------
# trainer loops
# ---------------------------------------------------------------------------


def test_trainer_validation(fold):
    cfg = small_cfg()
    unl = fold.train_source
    bad = type(unl)(
        name="x", dim=unl.dim, classes=unl.classes,
        class_names=unl.class_names, features=unl.features,
        labels=np.full(len(unl), -1, dtype=np.int32),
        subjects=unl.subjects, sessions=unl.sessions,
    )
    with pytest.raises(DataError, match="labeled"):
        Trainer(cfg, bad, fold.train_target)
    with pytest.raises(ConfigError, match="embed_dim"):
        Trainer(
            small_cfg(ablation="no-prototypes", embed_dim=2),
            fold.train_source, fold.train_target,
        )


def test_trainer_deterministic_twins(fold):
    cfg = small_cfg(variant="M", epochs=2)
    a = Trainer(cfg, fold.train_source, fold.train_target, fold.test)
    b = Trainer(cfg, fold.train_source, fold.train_target, fold.test)
    ra, rb = a.run(), b.run()
    pa, pb = a.model.param_sections(), b.model.param_sections()
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)
    ra.pop("timing")
    rb.pop("timing")
    assert json.dumps(ra, sort_keys=True) == json.dumps(rb, sort_keys=True)


def test_history_structure(fold):
    cfg = small_cfg(variant="M", epochs=1)
    rep = Trainer(cfg, fold.train_source, fold.train_target, fold.test).run()
    entry = rep["history"][0]
    assert entry["epoch"] == 0
    for key in ("l_ral", "l_align", "l_contrast", "l_adv", "total"):
        assert isinstance(entry[key], float)
    assert isinstance(entry["l_disc"], float)
    probes = entry["probes"]
    assert set(probes) == {"after_stage1", "after_stage2", "after_stage3"}
    assert all(isinstance(v, float) for v in probes.values())

    rep_l = Trainer(
        small_cfg(variant="L", epochs=1),
        fold.train_source, fold.train_target,
    ).run()
    entry_l = rep_l["history"][0]
    assert entry_l["l_disc"] is None and entry_l["probes"] is None
    assert rep_l["final"]["accuracy"] is None  # no test corpus given


def test_epochs_zero_reports_null_accuracy(fold):
    cfg = small_cfg(epochs=0)
    rep = Trainer(cfg, fold.train_source, fold.train_target, fold.test).run()
    assert rep["epochs_run"] == 0
    assert rep["history"] == []
    assert rep["final"]["accuracy"] is None


def test_stage2_freezes_extractor_discriminator_prototypes(fold):
    cfg = small_cfg(variant="M", epochs=1)
    t = Trainer(cfg, fold.train_source, fold.train_target)
    t.run()  # populate prototypes and optimizer state
    xs, ys = t.x_s[:32], t.y_s[:32]
    xt = t.x_t[:32]
    before = {k: v.copy() for k, v in t.model.param_sections().items()}
    t._step("s2", xs, ys, xt)
    after = t.model.param_sections()
    for name in before:
        if name.startswith("head"):
            assert not np.array_equal(before[name], after[name])
        else:
            assert np.array_equal(before[name], after[name])


def test_stage3_freezes_heads_and_prototypes(fold):
    cfg = small_cfg(variant="M", epochs=1)
    t = Trainer(cfg, fold.train_source, fold.train_target)
    t.run()
    xs, ys, xt = t.x_s[:32], t.y_s[:32], t.x_t[:32]
    before = {k: v.copy() for k, v in t.model.param_sections().items()}
    t._step("s3", xs, ys, xt)
    after = t.model.param_sections()
    for name in before:
        frozen = name.startswith("head") or name == "prototypes"
        if frozen:
            assert np.array_equal(before[name], after[name])
        else:
            assert not np.array_equal(before[name], after[name])


def test_stage1_updates_everything(fold):
    cfg = small_cfg(variant="M", epochs=1)
    t = Trainer(cfg, fold.train_source, fold.train_target)
    t.run()
    xs, ys, xt = t.x_s[:32], t.y_s[:32], t.x_t[:32]
    before = {k: v.copy() for k, v in t.model.param_sections().items()}
    t._step("s1", xs, ys, xt)
    after = t.model.param_sections()
    for name in before:
        assert not np.array_equal(before[name], after[name]), name


def test_z_score_standardizes_training_features(fold):
    t = Trainer(small_cfg(), fold.train_source, fold.train_target)
    assert np.abs(t.x_s.mean(axis=0)).max() < 1e-9
    assert np.abs(t.x_s.std(axis=0) - 1.0).max() < 1e-6
    raw = Trainer(
        small_cfg(z_score=False), fold.train_source, fold.train_target
    )
    assert np.array_equal(
        raw.x_s, fold.train_source.features.astype(np.float64)
    )


def test_nan_abort_names_epoch(fold):
    cfg = small_cfg(epochs=1)
    t = Trainer(cfg, fold.train_source, fold.train_target)
    t.model.extractor.weights[0][0, 0] = np.nan
    with pytest.raises(NumericError, match="epoch 0"):
        t.run()


def test_stop_epoch_validation(fold):
    t = Trainer(small_cfg(epochs=2), fold.train_source, fold.train_target)
    with pytest.raises(TrainerError, match="stop_epoch"):
        t.run(stop_epoch=3)


@pytest.mark.parametrize(
    "variant,ablation",
    [
        ("L", "no-ral-source"),
        ("L", "no-ral-both"),
        ("L", "no-prototypes"),
        ("L", "no-theta"),
        ("L", "no-discriminator"),
        ("M", "no-stage2"),
        ("M", "no-stage3"),
        ("M", "no-stage23"),
    ],
)
def test_ablations_run(fold, variant, ablation):
    cfg = small_cfg(variant=variant, ablation=ablation, epochs=1)
    rep = Trainer(cfg, fold.train_source, fold.train_target, fold.test).run()
    assert rep["epochs_run"] == 1
    assert rep["final"]["accuracy"] is not None
    if ablation == "no-discriminator":
        assert rep["history"][0]["grl_coeff"] == 0.0


def test_no_theta_keeps_heads_fixed(fold):
    cfg = small_cfg(ablation="no-theta", epochs=1)
    t = Trainer(cfg, fold.train_source, fold.train_target)
    assert np.array_equal(t.model.heads[0].theta, np.eye(16))
    t.run()
    assert np.array_equal(t.model.heads[0].theta, np.eye(16))


def test_no_prototypes_uses_anchors(fold):
    cfg = small_cfg(ablation="no-prototypes", epochs=1)
    t = Trainer(cfg, fold.train_source, fold.train_target, fold.test)
    t.run()
    assert not t.model.bank.initialized  # bank bypassed entirely
    assert t.anchors.shape == (3, 16)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_resume_matches_straight_run(fold, tmp_path):
    cfg = small_cfg(variant="M", epochs=4)
    straight = Trainer(cfg, fold.train_source, fold.train_target, fold.test)
    rep_straight = straight.run()

    half = Trainer(cfg, fold.train_source, fold.train_target, fold.test)
    half.run(stop_epoch=2)
    path = tmp_path / "ck.bin"
    save_checkpoint(half, str(path))
    resumed = resume_trainer(
        str(path), fold.train_source, fold.train_target, fold.test
    )
    rep_resumed = resumed.run()

    ps = straight.model.param_sections()
    pr = resumed.model.param_sections()
    assert all(np.array_equal(ps[k], pr[k]) for k in ps)
    rep_straight.pop("timing")
    rep_resumed.pop("timing")
    assert json.dumps(rep_straight, sort_keys=True) == json.dumps(
        rep_resumed, sort_keys=True
    )


def test_checkpoint_save_load_save_bytes(fold, tmp_path):
    cfg = small_cfg(variant="M", epochs=2)
    t = Trainer(cfg, fold.train_source, fold.train_target)
    t.run(stop_epoch=1)
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_checkpoint(t, str(p1))
    again = resume_trainer(str(p1), fold.train_source, fold.train_target)
    save_checkpoint(again, str(p2))
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_sections_reflect_optimizers(fold, tmp_path):
    cfg = small_cfg(variant="M", epochs=1)  # heads use adam, rest rmsprop
    t = Trainer(cfg, fold.train_source, fold.train_target)
    t.run()
    path = tmp_path / "ck.bin"
    save_checkpoint(t, str(path))
    header, arrays, _ = load_checkpoint(str(path))
    names = [name for name, _ in header["sections"]]
    assert "opt.extractor.extractor.0.v" in names
    assert "opt.heads.head0.theta.m" in names
    assert "opt.heads.head1.theta.v" in names
    assert not any(".extractor.0.m" in n for n in names)  # rmsprop has no m
    assert header["opt_counters"]["heads"]["head0.theta"] > 0


def test_checkpoint_rejects_garbage(fold, tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTACKPT" + b"\x00" * 32)
    with pytest.raises(TrainerError, match="not a"):
        load_checkpoint(str(bad))

    cfg = small_cfg(epochs=1)
    t = Trainer(cfg, fold.train_source, fold.train_target)
    t.run()
    good = tmp_path / "good.bin"
    save_checkpoint(t, str(good))
    blob = good.read_bytes()

    trunc = tmp_path / "trunc.bin"
    trunc.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(TrainerError, match="truncated"):
        load_checkpoint(str(trunc))

    wrong = tmp_path / "wrong.bin"
    wrong.write_bytes(blob.replace(b'"version":1', b'"version":9', 1))
    with pytest.raises(TrainerError, match="version"):
        load_checkpoint(str(wrong))

    with pytest.raises(TrainerError, match="cannot read"):
        load_checkpoint(str(tmp_path / "absent.bin"))


def test_checkpoint_magic_prefix(fold, tmp_path):
    cfg = small_cfg(epochs=1)
    t = Trainer(cfg, fold.train_source, fold.train_target)
    path = tmp_path / "ck.bin"
    save_checkpoint(t, str(path))
    assert path.read_bytes().startswith(CHECKPOINT_MAGIC)

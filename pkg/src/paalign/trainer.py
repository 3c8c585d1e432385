"""Training loops for the prototype-aligned adversarial models.

The single-head variants run one pass per epoch minimizing

    l_ral + lambda1*l_align + lambda2*l_contrast + l_adv.

The dual-head variant runs three passes per epoch: the joint pass above,
a head-only pass minimizing l_ral - lambda3*l_disc (pushing the two
relation heads apart on the target batch), and an extractor pass
minimizing l_ral + l_adv + lambda3*l_disc with the heads frozen.  A held
target probe batch is scored with l_disc after every pass so the
widen/shrink cycle is observable per epoch.

Checkpoints serialize parameters, optimizer buffers, counters, per-epoch
history, and the data-order RNG state, so a resumed run reproduces the
uninterrupted one bit for bit.  Feature standardization is re-derived
from the training corpora on resume rather than stored.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels
from .alignment import (
    KernelSpec,
    class_weights,
    l_align_from,
    l_contrast_from,
    pooled_gram,
)
from .boundary import l_disc as l_disc_node
from .boundary import l_disc_value
from .data import Corpus, DataError
from .graph import Graph, Node
from .model import PaaModel, build_model, class_logits_np, softmax_rows_np

log = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "TrainerError",
    "NumericError",
    "PaaConfig",
    "parse_config",
    "config_text",
    "config_hash",
    "build_pairs",
    "l_ral",
    "l_adv",
    "grl_coefficient",
    "Trainer",
    "save_checkpoint",
    "load_checkpoint",
    "resume_trainer",
    "CHECKPOINT_MAGIC",
]


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


class TrainerError(ValueError):
    """Invalid trainer usage or corrupt checkpoint."""


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

VARIANTS = ("L", "C", "M")
OPTIMIZERS = ("rmsprop", "adam")
ABLATIONS = (
    "none",
    "no-ral-source",
    "no-ral-both",
    "no-prototypes",
    "no-theta",
    "no-discriminator",
    "no-stage2",
    "no-stage3",
    "no-stage23",
)
STAGE_ABLATIONS = ("no-stage2", "no-stage3", "no-stage23")


@dataclass(frozen=True)
class PaaConfig:
    """Flat run configuration; field names double as config-file keys."""

    variant: str = "L"
    lambda1: float = 0.5
    lambda2: float = 1.5
    lambda3: float = 1.0
    lr: float = 1e-3
    epochs: int = 300
    batch: int = 256
    momentum_proto: float = 0.9
    conf_threshold: float = 0.9  # above 1.0 no pseudo-label can ever qualify
    grl_gamma: float = 10.0
    opt_extractor: str = "rmsprop"
    opt_discriminator: str = "rmsprop"
    opt_heads: str = ""  # empty means variant default: adam for M, else rmsprop
    seed: int = 0
    z_score: bool = True
    stage3_disc: bool = True
    ablation: str = "none"
    hidden: int = 256
    embed_dim: int = 128
    disc_hidden: int = 64


_BOOL_FIELDS = {"z_score", "stage3_disc"}
_INT_FIELDS = {"epochs", "batch", "seed", "hidden", "embed_dim", "disc_hidden"}
_FLOAT_FIELDS = {
    "lambda1", "lambda2", "lambda3", "lr", "momentum_proto",
    "conf_threshold", "grl_gamma",
}


def _normalize_ablation(raw: str) -> str:
    name = raw.strip().lower().replace("_", "-").replace("+", "")
    if name == "full":
        name = "none"
    if name not in ABLATIONS:
        raise ConfigError(
            f"unknown ablation {raw!r}; expected one of {', '.join(ABLATIONS)}"
        )
    return name


def validate_config(cfg: PaaConfig, explicit: Sequence[str] = ()) -> PaaConfig:
    """Check ranges, resolve defaults, and force the variant-gated weights.

    `explicit` lists keys the user actually wrote, so that e.g. a nonzero
    lambda3 is only an error for variant L when it was requested rather
    than inherited from the defaults.
    """
    explicit = set(explicit)
    variant = cfg.variant.upper()
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {cfg.variant!r}")
    for key in ("lambda1", "lambda2", "lambda3"):
        if getattr(cfg, key) < 0.0:
            raise ConfigError(f"{key} must be >= 0, got {getattr(cfg, key)}")
    if not cfg.lr > 0.0:
        raise ConfigError(f"lr must be positive, got {cfg.lr}")
    if cfg.epochs < 0:
        raise ConfigError(f"epochs must be >= 0, got {cfg.epochs}")
    if cfg.batch < 2:
        raise ConfigError(f"batch must be >= 2, got {cfg.batch}")
    if not 0.0 <= cfg.momentum_proto < 1.0:
        raise ConfigError(
            f"momentum_proto must lie in [0, 1), got {cfg.momentum_proto}"
        )
    if not (cfg.conf_threshold > 0.0 and math.isfinite(cfg.conf_threshold)):
        raise ConfigError(
            "conf_threshold must be positive and finite, "
            f"got {cfg.conf_threshold}"
        )
    if not cfg.grl_gamma > 0.0:
        raise ConfigError(f"grl_gamma must be positive, got {cfg.grl_gamma}")
    for key in ("hidden", "embed_dim", "disc_hidden"):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{key} must be >= 1, got {getattr(cfg, key)}")
    if cfg.seed < 0:
        raise ConfigError(f"seed must be >= 0, got {cfg.seed}")

    ablation = _normalize_ablation(cfg.ablation)
    if ablation in STAGE_ABLATIONS and variant != "M":
        raise ConfigError(
            f"ablation {ablation!r} only applies to variant M, not {variant}"
        )

    lambda2, lambda3 = cfg.lambda2, cfg.lambda3
    if variant == "L":
        if "lambda2" in explicit and cfg.lambda2 != 0.0:
            raise ConfigError("variant L has no contrastive term; lambda2 must be 0")
        if "lambda3" in explicit and cfg.lambda3 != 0.0:
            raise ConfigError("variant L has no dual heads; lambda3 must be 0")
        lambda2, lambda3 = 0.0, 0.0
    elif variant == "C":
        if "lambda3" in explicit and cfg.lambda3 != 0.0:
            raise ConfigError("variant C has no dual heads; lambda3 must be 0")
        lambda3 = 0.0

    opt_heads = cfg.opt_heads or ("adam" if variant == "M" else "rmsprop")
    for key, value in (
        ("opt_extractor", cfg.opt_extractor),
        ("opt_discriminator", cfg.opt_discriminator),
        ("opt_heads", opt_heads),
    ):
        if value not in OPTIMIZERS:
            raise ConfigError(
                f"{key} must be one of {OPTIMIZERS}, got {value!r}"
            )

    return replace(
        cfg,
        variant=variant,
        lambda2=lambda2,
        lambda3=lambda3,
        opt_heads=opt_heads,
        ablation=ablation,
    )


def parse_config(text: str) -> PaaConfig:
    """Parse `key = value` lines; '#' starts a comment, blank lines ignored."""
    known = {f.name for f in fields(PaaConfig)}
    raw: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if not value:
            raise ConfigError(f"line {lineno}: empty value for {key!r}")
        raw[key] = value

    kwargs: Dict[str, object] = {}
    for key, value in raw.items():
        try:
            if key in _BOOL_FIELDS:
                if value not in ("true", "false"):
                    raise ValueError("expected true or false")
                kwargs[key] = value == "true"
            elif key in _INT_FIELDS:
                kwargs[key] = int(value)
            elif key in _FLOAT_FIELDS:
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {value!r} ({exc})") from exc
    return validate_config(PaaConfig(**kwargs), explicit=list(kwargs))


def config_dict(cfg: PaaConfig) -> Dict[str, object]:
    return {f.name: getattr(cfg, f.name) for f in fields(PaaConfig)}


def config_text(cfg: PaaConfig) -> str:
    """Canonical config rendering; parsing it back is the identity."""
    lines = []
    for name, value in config_dict(cfg).items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: PaaConfig) -> str:
    return hashlib.sha256(config_text(cfg).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


class _Rmsprop:
    """Square-average RMSProp with epsilon outside the square root."""

    kind = "rmsprop"
    slots = ("v",)

    def __init__(self, lr: float, alpha: float = 0.99, eps: float = 1e-8):
        self.lr = lr
        self.alpha = alpha
        self.eps = eps
        self.buffers: Dict[str, Dict[str, np.ndarray]] = {}

    def apply(self, name: str, param: np.ndarray, grad: np.ndarray) -> None:
        buf = self.buffers.setdefault(name, {"v": np.zeros_like(param)})
        v = buf["v"]
        v *= self.alpha
        v += (1.0 - self.alpha) * grad * grad
        param -= self.lr * grad / (np.sqrt(v) + self.eps)

    def counters(self) -> Dict[str, int]:
        return {}

    def set_counters(self, counters: Dict[str, int]) -> None:
        pass


class _Adam:
    """Bias-corrected Adam."""

    kind = "adam"
    slots = ("m", "v")

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.buffers: Dict[str, Dict[str, np.ndarray]] = {}
        self.steps: Dict[str, int] = {}

    def apply(self, name: str, param: np.ndarray, grad: np.ndarray) -> None:
        buf = self.buffers.setdefault(
            name, {"m": np.zeros_like(param), "v": np.zeros_like(param)}
        )
        t = self.steps.get(name, 0) + 1
        self.steps[name] = t
        m, v = buf["m"], buf["v"]
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * grad * grad
        m_hat = m / (1.0 - self.beta1 ** t)
        v_hat = v / (1.0 - self.beta2 ** t)
        param -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def counters(self) -> Dict[str, int]:
        return dict(self.steps)

    def set_counters(self, counters: Dict[str, int]) -> None:
        self.steps = {k: int(v) for k, v in counters.items()}


def _make_optimizer(kind: str, lr: float):
    return _Adam(lr) if kind == "adam" else _Rmsprop(lr)


# ---------------------------------------------------------------------------
# loss building blocks
# ---------------------------------------------------------------------------

ADV_EPS = 1e-7
CE_EPS = 1e-12


def grl_coefficient(progress: float, gamma: float) -> float:
    """Reversal strength schedule: 0 at the start, saturating toward 1."""
    progress = min(max(progress, 0.0), 1.0)
    return 2.0 / (1.0 + math.exp(-gamma * progress)) - 1.0


def build_pairs(
    y_s: np.ndarray,
    pseudo_t: np.ndarray,
    confident_t: np.ndarray,
    drop_source_pairs: bool = False,
) -> Tuple[np.ndarray, np.ndarray]:
    """Same-class indicator and eligibility mask over [source; target] rows.

    Source rows always participate; target rows only when confident.  The
    mask covers all ordered pairs of eligible rows minus the diagonal, and
    optionally drops source-source pairs.
    """
    n_s, m = y_s.shape[0], pseudo_t.shape[0]
    labels = np.concatenate([y_s, pseudo_t]).astype(np.int64)
    eligible = np.concatenate(
        [np.ones(n_s, dtype=bool), confident_t.astype(bool)]
    )
    mask = np.outer(eligible, eligible)
    np.fill_diagonal(mask, False)
    if drop_source_pairs:
        mask[:n_s, :n_s] = False
    mu = (labels[:, None] == labels[None, :]).astype(np.float64)
    return mu, mask.astype(np.float64)


def l_ral(g: Graph, phi_heads: Sequence[Node], mu: np.ndarray,
          mask: np.ndarray) -> Node:
    """Mean over heads of the pairwise relation BCE; rejects an empty pair set."""
    if float(mask.sum()) == 0.0:
        raise TrainerError("relation loss needs at least one eligible pair")
    if not phi_heads:
        raise TrainerError("relation loss needs at least one head")
    total = g.pair_bce(phi_heads[0], mu, mask)
    for phi in phi_heads[1:]:
        total = total + g.pair_bce(phi, mu, mask)
    return total.scale(1.0 / len(phi_heads))


def l_adv(g: Graph, d_s: Node, d_t: Node) -> Node:
    """Domain BCE: -mean ln d_s - mean ln(1 - d_t), probabilities clamped."""
    term_s = d_s.clamp(ADV_EPS, 1.0 - ADV_EPS).log().mean().scale(-1.0)
    flipped = d_t.scale(-1.0).addc(1.0)
    term_t = flipped.clamp(ADV_EPS, 1.0 - ADV_EPS).log().mean().scale(-1.0)
    return term_s + term_t


def _ce_node(g: Graph, q: Node, onehot: np.ndarray, rows: float) -> Node:
    probs = q.softmax_rows()
    picked = (probs.clamp(CE_EPS, 1.0).log() * g.tensor(onehot)).sum()
    return picked.scale(-1.0 / rows)


def _zero(g: Graph) -> Node:
    return g.tensor(np.zeros((1, 1)))


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------

_PROBE_SALT = 104729  # held probe batch stream, disjoint from the data stream
_PROBE_SIZE = 256


def _norm_stats(features: np.ndarray, enabled: bool) -> Tuple[np.ndarray, np.ndarray]:
    if not enabled:
        d = features.shape[1]
        return np.zeros(d), np.ones(d)
    mean = features.mean(axis=0)
    std = np.maximum(features.std(axis=0), 1e-8)
    return mean, std


class Trainer:
    """Owns the model, optimizers, counters, and per-epoch history."""

    def __init__(self, cfg: PaaConfig, source: Corpus, target: Corpus,
                 test: Optional[Corpus] = None):
        cfg = validate_config(cfg)
        if not source.labeled:
            raise DataError("training source corpus must be fully labeled")
        if source.dim != target.dim:
            raise DataError(
                f"source dim {source.dim} != target dim {target.dim}"
            )
        if source.classes != target.classes:
            raise DataError(
                f"source classes {source.classes} != target {target.classes}"
            )
        if len(source) == 0 or len(target) == 0:
            raise DataError("training corpora must be non-empty")
        if test is not None and test.dim != source.dim:
            raise DataError("test corpus dimension mismatch")
        if cfg.ablation == "no-prototypes" and cfg.embed_dim < source.classes:
            raise ConfigError(
                "no-prototypes anchors need embed_dim >= number of classes"
            )

        self.cfg = cfg
        self.source = source
        self.target = target
        self.test = test
        self.classes = source.classes

        src64 = source.features.astype(np.float64)
        tgt64 = target.features.astype(np.float64)
        self._mean_s, self._std_s = _norm_stats(src64, cfg.z_score)
        self._mean_t, self._std_t = _norm_stats(tgt64, cfg.z_score)
        self.x_s = (src64 - self._mean_s) / self._std_s
        self.x_t = (tgt64 - self._mean_t) / self._std_t
        self.y_s = source.labels.astype(np.int64)

        self.rng = np.random.default_rng(cfg.seed)
        self.model = build_model(
            source.dim,
            self.classes,
            self.rng,
            hidden=cfg.hidden,
            embed_dim=cfg.embed_dim,
            disc_hidden=cfg.disc_hidden,
            n_heads=2 if cfg.variant == "M" else 1,
            momentum_proto=cfg.momentum_proto,
        )
        if cfg.ablation == "no-theta":
            for head in self.model.heads:
                head.set_theta(np.eye(cfg.embed_dim))
        self.anchors: Optional[np.ndarray] = None
        if cfg.ablation == "no-prototypes":
            anchors = np.zeros((self.classes, cfg.embed_dim))
            anchors[np.arange(self.classes), np.arange(self.classes)] = 1.0
            self.anchors = anchors

        self.opt_ext = _make_optimizer(cfg.opt_extractor, cfg.lr)
        self.opt_disc = _make_optimizer(cfg.opt_discriminator, cfg.lr)
        self.opt_heads = _make_optimizer(cfg.opt_heads, cfg.lr)

        self.kernel = KernelSpec()
        self.steps_per_epoch = max(
            1, -(-max(len(source), len(target)) // cfg.batch)
        )
        self.total_grl_steps = (
            self.steps_per_epoch * cfg.epochs * self._adv_passes_per_epoch()
        )
        self.epochs_done = 0
        self.steps_done = 0
        self.grl_steps_done = 0
        self.history: List[dict] = []
        self._seconds = 0.0

        probe_rng = np.random.default_rng([cfg.seed, _PROBE_SALT])
        size = min(_PROBE_SIZE, len(target))
        self._probe_rows = probe_rng.choice(len(target), size=size, replace=False)

    # ---- structure helpers ----

    def _adv_passes_per_epoch(self) -> int:
        if self.cfg.variant != "M":
            return 1
        return 1 + (0 if self.cfg.ablation in ("no-stage3", "no-stage23") else 1)

    def _stages_for_epoch(self) -> List[str]:
        if self.cfg.variant != "M":
            return ["single"]
        stages = ["s1"]
        if self.cfg.ablation not in ("no-stage2", "no-stage23"):
            stages.append("s2")
        if self.cfg.ablation not in ("no-stage3", "no-stage23"):
            stages.append("s3")
        return stages

    def _group_sections(self) -> Dict[str, List[str]]:
        ext_n = 2 * len(self.model.extractor.weights)
        disc_n = 2 * len(self.model.discriminator.weights)
        heads: List[str] = []
        if self.cfg.ablation != "no-theta":
            heads = [f"head{k}.theta" for k in range(len(self.model.heads))]
        return {
            "extractor": [f"extractor.{i}" for i in range(ext_n)],
            "discriminator": [f"discriminator.{i}" for i in range(disc_n)],
            "heads": heads,
        }

    def _proto_rows(self) -> np.ndarray:
        if self.anchors is not None:
            return self.anchors
        if not self.model.bank.initialized:
            # before the first source batch every class row is still zero
            return np.zeros((self.classes, self.cfg.embed_dim))
        return self.model.bank.snapshot()

    def _grl_coeff(self) -> float:
        if self.cfg.ablation == "no-discriminator":
            return 0.0
        progress = self.grl_steps_done / max(1, self.total_grl_steps)
        return grl_coefficient(progress, self.cfg.grl_gamma)

    # ---- one optimizer step on one batch ----

    def _step(self, stage: str, xs: np.ndarray, ys: np.ndarray,
              xt: np.ndarray) -> Dict[str, float]:
        cfg = self.cfg
        model = self.model

        if stage in ("single", "s1") and self.anchors is None:
            model.bank.update(model.embed_np(xs), ys)
        protos = self._proto_rows()

        # detached pseudo-labels from the current parameters
        z_t_np = model.embed_np(xt)
        q_t = [class_logits_np(z_t_np, h.theta, protos) for h in model.heads]
        p_t = softmax_rows_np(q_t[0])
        for q in q_t[1:]:
            p_t = p_t + softmax_rows_np(q)
        p_t = p_t / len(q_t)
        confident = p_t.max(axis=1) >= cfg.conf_threshold
        pseudo = np.argmax(p_t, axis=1)
        if stage in ("s2", "s3"):
            # the divergence / convergence passes keep source-pair
            # supervision only; pseudo-labelled pairs belong to the joint
            # pass, otherwise the game can cement its own mistakes
            confident = np.zeros_like(confident)

        g = Graph()
        ext_leaves = model.extractor.bind(g)
        disc_leaves = model.discriminator.bind(g)
        head_leaves = [g.tensor(h.theta) for h in model.heads]
        protos_node = g.tensor(protos)
        z_s = model.extractor.apply(ext_leaves, g.tensor(xs))
        z_t = model.extractor.apply(ext_leaves, g.tensor(xt))

        terms: Dict[str, float] = {}

        # relation supervision (with the cross-entropy ablation variants)
        ral_parts: List[Node] = []
        if cfg.ablation in ("no-ral-source", "no-ral-both"):
            onehot_s = np.eye(self.classes)[ys]
            for theta in head_leaves:
                q_s_node = (z_s @ theta) @ protos_node.T
                ral_parts.append(_ce_node(g, q_s_node, onehot_s, len(ys)))
            if cfg.ablation == "no-ral-both" and confident.any():
                onehot_t = np.where(
                    confident[:, None], np.eye(self.classes)[pseudo], 0.0
                )
                for theta in head_leaves:
                    q_t_node = (z_t @ theta) @ protos_node.T
                    ral_parts.append(
                        _ce_node(g, q_t_node, onehot_t, float(confident.sum()))
                    )
            ce = ral_parts[0]
            for part in ral_parts[1:]:
                ce = ce + part
            ral_node = ce.scale(1.0 / len(model.heads))
        else:
            ral_node = None
        if cfg.ablation == "no-ral-source":
            # keep the target-involved pairs on top of the source CE
            mu, mask = build_pairs(ys, pseudo, confident, drop_source_pairs=True)
            if mask.sum() > 0.0:
                z_all = g.concat_rows(z_s, z_t)
                phis = []
                for theta in head_leaves:
                    q_all = (z_all @ theta) @ protos_node.T
                    phis.append(_pairwise_phi(g, q_all))
                ral_node = ral_node + l_ral(g, phis, mu, mask)
        elif cfg.ablation != "no-ral-both":
            mu, mask = build_pairs(ys, pseudo, confident)
            if mask.sum() > 0.0:
                z_all = g.concat_rows(z_s, z_t)
                phis = []
                for theta in head_leaves:
                    q_all = (z_all @ theta) @ protos_node.T
                    phis.append(_pairwise_phi(g, q_all))
                ral_node = l_ral(g, phis, mu, mask)
            else:
                ral_node = _zero(g)

        total = ral_node
        terms["l_ral"] = float(ral_node.value[0, 0])

        # class-conditional kernel terms (joint passes only)
        if stage in ("single", "s1") and (cfg.lambda1 > 0.0 or cfg.lambda2 > 0.0):
            cw = class_weights(ys, p_t, cfg.conf_threshold)
            pg = pooled_gram(g, z_s, z_t, self.kernel)
            align_node = l_align_from(pg, cw)
            contrast_node = l_contrast_from(pg, cw)
            terms["l_align"] = float(align_node.value[0, 0])
            terms["l_contrast"] = float(contrast_node.value[0, 0])
            if cfg.lambda1 > 0.0:
                total = total + align_node.scale(cfg.lambda1)
            if cfg.lambda2 > 0.0:
                total = total + contrast_node.scale(cfg.lambda2)
        else:
            terms["l_align"] = 0.0
            terms["l_contrast"] = 0.0

        # adversarial domain term
        coeff = self._grl_coeff()
        if stage in ("single", "s1", "s3"):
            d_s = model.discriminator.apply(disc_leaves, z_s.grl(coeff)).sigmoid()
            d_t = model.discriminator.apply(disc_leaves, z_t.grl(coeff)).sigmoid()
            adv_node = l_adv(g, d_s, d_t)
            terms["l_adv"] = float(adv_node.value[0, 0])
            terms["grl_coeff"] = coeff
            total = total + adv_node
            self.grl_steps_done += 1
        else:
            terms["l_adv"] = 0.0
            terms["grl_coeff"] = coeff

        # dual-head disagreement
        if stage == "s2" or (stage == "s3" and cfg.stage3_disc):
            disc_node = l_disc_node(
                g, z_t, head_leaves[0], head_leaves[1], protos_node
            )
            terms["l_disc"] = float(disc_node.value[0, 0])
            sign = -cfg.lambda3 if stage == "s2" else cfg.lambda3
            total = total + disc_node.scale(sign)
        else:
            terms["l_disc"] = 0.0

        terms["total"] = float(total.value[0, 0])
        if not math.isfinite(terms["total"]):
            raise NumericError(
                f"non-finite total loss at epoch {self.epochs_done} "
                f"stage {stage}"
            )

        g.backward(total)

        groups = self._group_sections()
        sections = self.model.param_sections()
        leaf_by_name: Dict[str, Node] = {}
        for name, leaf in zip(groups["extractor"], ext_leaves):
            leaf_by_name[name] = leaf
        for name, leaf in zip(groups["discriminator"], disc_leaves):
            leaf_by_name[name] = leaf
        for k, leaf in enumerate(head_leaves):
            leaf_by_name[f"head{k}.theta"] = leaf

        update_groups = {
            "single": ("extractor", "discriminator", "heads"),
            "s1": ("extractor", "discriminator", "heads"),
            "s2": ("heads",),
            "s3": ("extractor", "discriminator"),
        }[stage]
        opt_by_group = {
            "extractor": self.opt_ext,
            "discriminator": self.opt_disc,
            "heads": self.opt_heads,
        }
        for group in update_groups:
            opt = opt_by_group[group]
            for name in groups[group]:
                opt.apply(name, sections[name], g.grad(leaf_by_name[name]))

        self.steps_done += 1
        return terms

    # ---- epoch orchestration ----

    def _batches(self, perm_s: np.ndarray, perm_t: np.ndarray):
        b = self.cfg.batch
        n_s, n_t = len(perm_s), len(perm_t)
        longest = max(n_s, n_t)
        for k in range(self.steps_per_epoch):
            lo = k * b
            hi = min(lo + b, longest)
            if lo >= hi:
                break
            idx = np.arange(lo, hi)
            yield perm_s[idx % n_s], perm_t[idx % n_t]

    def _probe(self) -> float:
        if self.cfg.variant != "M" or len(self._probe_rows) < 2:
            return 0.0
        z = self.model.embed_np(self.x_t[self._probe_rows])
        return l_disc_value(
            z,
            self.model.heads[0].theta,
            self.model.heads[1].theta,
            self._proto_rows(),
        )

    def run_epoch(self) -> dict:
        cfg = self.cfg
        perm_s = self.rng.permutation(len(self.source))
        perm_t = self.rng.permutation(len(self.target))
        record: dict = {"epoch": self.epochs_done}
        probes: Dict[str, Optional[float]] = {
            "after_stage1": None, "after_stage2": None, "after_stage3": None,
        }

        stage_terms: Dict[str, List[Dict[str, float]]] = {}
        for stage in self._stages_for_epoch():
            per_batch: List[Dict[str, float]] = []
            for rows_s, rows_t in self._batches(perm_s, perm_t):
                per_batch.append(
                    self._step(
                        stage,
                        self.x_s[rows_s],
                        self.y_s[rows_s],
                        self.x_t[rows_t],
                    )
                )
            stage_terms[stage] = per_batch
            if cfg.variant == "M":
                key = {"s1": "after_stage1", "s2": "after_stage2",
                       "s3": "after_stage3"}[stage]
                probes[key] = self._probe()

        main = stage_terms.get("single") or stage_terms.get("s1")

        def mean_of(batches, key):
            return float(np.mean([b[key] for b in batches]))

        for key in ("l_ral", "l_align", "l_contrast", "l_adv", "total"):
            record[key] = mean_of(main, key)
        record["grl_coeff"] = main[-1]["grl_coeff"]
        if "s2" in stage_terms:
            record["l_disc"] = mean_of(stage_terms["s2"], "l_disc")
        else:
            record["l_disc"] = None
        record["probes"] = probes if cfg.variant == "M" else None

        for key in ("l_ral", "l_align", "l_contrast", "l_adv", "total"):
            if not math.isfinite(record[key]):
                raise NumericError(
                    f"non-finite {key} at epoch {self.epochs_done}"
                )
        self.epochs_done += 1
        self.history.append(record)
        log.debug(
            "epoch %d: total=%.5f ral=%.5f align=%.5f adv=%.5f",
            record["epoch"], record["total"], record["l_ral"],
            record["l_align"], record["l_adv"],
        )
        return record

    def run(self, stop_epoch: Optional[int] = None) -> dict:
        """Advance to `stop_epoch` (default: the configured horizon) and
        return the report."""
        target_epoch = self.cfg.epochs if stop_epoch is None else stop_epoch
        if target_epoch > self.cfg.epochs:
            raise TrainerError(
                f"stop_epoch {target_epoch} exceeds configured epochs "
                f"{self.cfg.epochs}"
            )
        start = time.perf_counter()
        while self.epochs_done < target_epoch:
            self.run_epoch()
        self._seconds += time.perf_counter() - start
        return self.report()

    # ---- evaluation and reporting ----

    def transform_source(self, features: np.ndarray) -> np.ndarray:
        """Apply the frozen source-domain standardization."""
        return (features.astype(np.float64) - self._mean_s) / self._std_s

    def transform_target(self, features: np.ndarray) -> np.ndarray:
        """Apply the frozen target-domain standardization."""
        return (features.astype(np.float64) - self._mean_t) / self._std_t

    def predict_source(self, features: np.ndarray) -> np.ndarray:
        return self.model.predict_np(
            self.transform_source(features), anchors=self.anchors
        )

    def predict_target(self, features: np.ndarray) -> np.ndarray:
        return self.model.predict_np(
            self.transform_target(features), anchors=self.anchors
        )

    def evaluate(self, corpus: Corpus) -> dict:
        if self.epochs_done == 0:
            return {"accuracy": None, "confusion": None,
                    "per_class_recall": None}
        pred = self.predict_target(corpus.features)
        truth = corpus.labels.astype(np.int64)
        c = self.classes
        confusion = np.zeros((c, c), dtype=np.int64)
        np.add.at(confusion, (truth, pred), 1)
        with np.errstate(invalid="ignore"):
            recall = confusion.diagonal() / confusion.sum(axis=1)
        recall = [
            (float(r) if math.isfinite(r) else None) for r in recall
        ]
        return {
            "accuracy": float((pred == truth).mean()),
            "confusion": confusion.tolist(),
            "per_class_recall": recall,
        }

    def report(self) -> dict:
        final = (
            self.evaluate(self.test)
            if self.test is not None
            else {"accuracy": None, "confusion": None, "per_class_recall": None}
        )
        return {
            "schema": "paalign.run_report.v1",
            "config": config_dict(self.cfg),
            "config_hash": config_hash(self.cfg),
            "backend": _kernels.BACKEND,
            "n_source": len(self.source),
            "n_target": len(self.target),
            "n_test": len(self.test) if self.test is not None else None,
            "epochs_run": self.epochs_done,
            "history": self.history,
            "final": final,
            "timing": {"seconds_total": self._seconds},
        }


def _pairwise_phi(g: Graph, q: Node) -> Node:
    # local import indirection keeps boundary's guard conventions in one place
    from .boundary import pairwise_phi

    return pairwise_phi(g, q)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"PAACKPT1"


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(trainer: Trainer, path: str) -> None:
    """Binary checkpoint: magic, JSON header, float64 blob, RNG state."""
    sections = trainer.model.param_sections()
    order: List[Tuple[str, np.ndarray]] = [
        (name, arr) for name, arr in sections.items()
    ]
    groups = trainer._group_sections()
    opt_by_group = {
        "extractor": trainer.opt_ext,
        "discriminator": trainer.opt_disc,
        "heads": trainer.opt_heads,
    }
    for group in ("extractor", "discriminator", "heads"):
        opt = opt_by_group[group]
        for name in groups[group]:
            buf = opt.buffers.get(name)
            for slot in opt.slots:
                arr = (
                    buf[slot] if buf is not None
                    else np.zeros_like(sections[name])
                )
                order.append((f"opt.{group}.{name}.{slot}", arr))

    header = {
        "version": 1,
        "config": config_dict(trainer.cfg),
        "config_hash": config_hash(trainer.cfg),
        "epochs_done": trainer.epochs_done,
        "steps_done": trainer.steps_done,
        "grl_steps_done": trainer.grl_steps_done,
        "total_grl_steps": trainer.total_grl_steps,
        "proto_seen": [bool(v) for v in trainer.model.bank.seen],
        "opt_counters": {
            group: opt_by_group[group].counters()
            for group in ("extractor", "discriminator", "heads")
        },
        "history": trainer.history,
        "sections": [[name, list(arr.shape)] for name, arr in order],
    }
    header_bytes = _canonical_json(header)
    blob = b"".join(
        np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in order
    )
    rng_bytes = _canonical_json(trainer.rng.bit_generator.state)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(rng_bytes)))
        fh.write(rng_bytes)


def load_checkpoint(path: str) -> Tuple[dict, Dict[str, np.ndarray], dict]:
    """Read (header, arrays-by-section, rng_state); validates framing."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise TrainerError(f"cannot read checkpoint {path!r}: {exc}") from exc
    if len(data) < len(CHECKPOINT_MAGIC) + 4 or not data.startswith(
        CHECKPOINT_MAGIC
    ):
        raise TrainerError(f"{path!r} is not a paalign checkpoint")
    off = len(CHECKPOINT_MAGIC)
    (header_len,) = struct.unpack_from("<I", data, off)
    off += 4
    if off + header_len > len(data):
        raise TrainerError(f"checkpoint {path!r} is truncated (header)")
    header = json.loads(data[off : off + header_len].decode("utf-8"))
    off += header_len
    if header.get("version") != 1:
        raise TrainerError(
            f"unsupported checkpoint version {header.get('version')!r}"
        )
    if off + 8 > len(data):
        raise TrainerError(f"checkpoint {path!r} is truncated (blob length)")
    (blob_len,) = struct.unpack_from("<Q", data, off)
    off += 8
    if off + blob_len > len(data):
        raise TrainerError(f"checkpoint {path!r} is truncated (blob)")
    blob = data[off : off + blob_len]
    off += blob_len
    if off + 4 > len(data):
        raise TrainerError(f"checkpoint {path!r} is truncated (rng length)")
    (rng_len,) = struct.unpack_from("<I", data, off)
    off += 4
    if off + rng_len > len(data):
        raise TrainerError(f"checkpoint {path!r} is truncated (rng)")
    rng_state = json.loads(data[off : off + rng_len].decode("utf-8"))

    arrays: Dict[str, np.ndarray] = {}
    cursor = 0
    for name, shape in header["sections"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if cursor + nbytes > len(blob):
            raise TrainerError(
                f"checkpoint {path!r} blob too short at section {name!r}"
            )
        arr = np.frombuffer(
            blob, dtype="<f8", count=count, offset=cursor
        ).reshape(shape)
        # frombuffer views are read-only; training updates params in place
        arrays[name] = arr.copy()
        cursor += nbytes
    if cursor != len(blob):
        raise TrainerError(f"checkpoint {path!r} blob has trailing bytes")
    return header, arrays, rng_state


def resume_trainer(path: str, source: Corpus, target: Corpus,
                   test: Optional[Corpus] = None) -> Trainer:
    """Rebuild a Trainer mid-run; requires the original corpora."""
    header, arrays, rng_state = load_checkpoint(path)
    cfg = validate_config(PaaConfig(**header["config"]))
    trainer = Trainer(cfg, source, target, test)

    model_names = list(trainer.model.param_sections())
    trainer.model.load_param_sections({k: arrays[k] for k in model_names})
    trainer.model.bank.seen = np.asarray(header["proto_seen"], dtype=bool)

    groups = trainer._group_sections()
    opt_by_group = {
        "extractor": trainer.opt_ext,
        "discriminator": trainer.opt_disc,
        "heads": trainer.opt_heads,
    }
    for group in ("extractor", "discriminator", "heads"):
        opt = opt_by_group[group]
        for name in groups[group]:
            buf = {}
            for slot in opt.slots:
                key = f"opt.{group}.{name}.{slot}"
                if key not in arrays:
                    raise TrainerError(f"checkpoint missing section {key!r}")
                buf[slot] = arrays[key].copy()
            opt.buffers[name] = buf
        opt.set_counters(header["opt_counters"].get(group, {}))

    trainer.epochs_done = int(header["epochs_done"])
    trainer.steps_done = int(header["steps_done"])
    trainer.grl_steps_done = int(header["grl_steps_done"])
    trainer.total_grl_steps = int(header["total_grl_steps"])
    trainer.history = list(header["history"])
    # wall-clock time is per-process state, deliberately not checkpointed:
    # identical runs must produce byte-identical checkpoint files
    trainer.rng.bit_generator.state = rng_state
    return trainer

"""Meta-training loop: two-view episodes, four loss terms, replay, SGD.

One optimization step runs the whole pipeline on a single episode: augment
into two views, encode, build per-view and hybrid prototypes, evaluate the
classification / inter / intra terms, replay one cached episode for the
forgetting term, combine as ``ce + lambda1*inter + lambda2*intra + forget``
(disabled terms contribute exactly 0), and apply one SGD-momentum update.

Randomness is split into named streams (sampling, augmentation, replay,
validation) fanned out from the run seed, so toggling one feature never
perturbs the draws of another: disabling a term via its toggle is exactly
equivalent to zeroing its coefficient.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import encoder as enc
from .cache import CacheConfig, CacheEntry, ReplayCache
from .episodes import (
    AugPolicy,
    DatasetSplit,
    Episode,
    MultiViewEpisode,
    augment_episode,
    identity_policy,
    policy_from_dict,
    policy_to_dict,
    sample_episode,
)
from .exceptions import CheckpointError, DivergenceError, InvalidArgument
from .losses import (
    LossConfig,
    episode_ce_loss_grad,
    forget_loss_grad,
    intra_class_loss_grad,
    inter_class_loss_grad,
    prediction_matrix,
    prediction_matrix_vjp,
    total_loss,
)
from .prototypes import class_prototypes, class_prototypes_vjp, hybrid_prototypes
from .utils import rng_state, restore_rng, spawn_streams
from . import _kernels as K

# Ablation settings: which of (inter, intra, forget) each keeps enabled.
ABLATION_SETTINGS = {
    "I": (True, True, False),
    "II": (True, False, True),
    "III": (False, True, True),
    "IV": (False, False, True),
    "full": (True, True, True),
    "ce": (False, False, False),
}


@dataclass
class TrainConfig:
    n_way: int = 5
    k_shot: int = 1
    q_query: int = 15
    epochs: int = 20
    episodes_per_epoch: int = 100
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    loss: LossConfig = field(default_factory=LossConfig)
    cache: CacheConfig = field(default_factory=CacheConfig)
    policy: AugPolicy = field(default_factory=identity_policy)
    use_inter: bool = True
    use_intra: bool = True
    use_forget: bool = True
    alpha: float = 0.5
    ce_on_hybrid: bool = False
    seed: int = 0
    val_episodes: int = 200

    def __post_init__(self):
        if min(self.n_way, self.k_shot, self.q_query) < 1 or self.n_way < 2:
            raise InvalidArgument("need n_way >= 2, k_shot >= 1, q_query >= 1")
        if self.epochs < 0 or self.episodes_per_epoch < 1:
            raise InvalidArgument("epochs >= 0 and episodes_per_epoch >= 1 required")
        if self.lr <= 0:
            raise InvalidArgument("lr must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidArgument("alpha must lie in [0, 1]")

    def with_setting(self, setting: str) -> "TrainConfig":
        """Copy of this config with the toggles of one ablation setting."""
        if setting not in ABLATION_SETTINGS:
            raise InvalidArgument(
                f"unknown ablation setting {setting!r}; have {sorted(ABLATION_SETTINGS)}"
            )
        use_inter, use_intra, use_forget = ABLATION_SETTINGS[setting]
        return replace(
            self, use_inter=use_inter, use_intra=use_intra, use_forget=use_forget
        )


@dataclass
class StepMetrics:
    step: int
    ce: float
    inter: float
    intra: float
    forget: float
    total: float
    accuracy: float
    cache_size: int

    def to_json_line(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class SgdMomentum:
    """SGD with momentum and decoupled-from-nothing classic weight decay:
    v <- mu*v + g + wd*p ; p <- p - lr*v."""

    def __init__(self, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for key, grad in grads.items():
            buf = self.velocity.get(key)
            if buf is None:
                buf = np.zeros_like(params[key])
            update = grad + self.weight_decay * params[key]
            buf = self.momentum * buf + update
            self.velocity[key] = buf
            params[key] = params[key] - self.lr * buf


@dataclass
class ReplayTask:
    """The view-1 arrays of a cached episode plus its historical matrix."""

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    n_way: int
    k_shot: int
    h: np.ndarray

    @classmethod
    def from_entry(cls, entry: CacheEntry) -> "ReplayTask":
        v = entry.episode.view1
        return cls(v.support_x, v.support_y, v.query_x, v.query_y, v.n_way, v.k_shot, entry.h)


def episode_objective(
    config: enc.EncoderConfig,
    params: dict[str, np.ndarray],
    mvep: MultiViewEpisode,
    replay: ReplayTask | None,
    cfg: TrainConfig,
):
    """All loss terms, total-objective parameter gradients, and step aux data.

    Gradients carry the Eq.-style weights (1 for ce and forget, lambda1 /
    lambda2 for inter / intra); disabled terms are skipped entirely and
    logged as 0.
    """
    lc = cfg.loss
    n, k = mvep.view1.n_way, mvep.view1.k_shot
    y_sup = mvep.view1.support_y
    y_qry = mvep.view1.query_y
    nk = y_sup.shape[0]

    z_cat, caches, zs, zq = [], [], [], []
    for view in (mvep.view1, mvep.view2):
        x = np.concatenate([view.support_x, view.query_x])
        z, cache = enc.forward(config, params, x)
        z_cat.append(z)
        caches.append(cache)
        zs.append(z[:nk])
        zq.append(z[nk:])

    p = [class_prototypes(zs[v], y_sup, n, k) for v in (0, 1)]
    hybrid = hybrid_prototypes(p[0], p[1], cfg.alpha)

    d_zq = [np.zeros_like(zq[0]), np.zeros_like(zq[1])]
    d_p = [np.zeros_like(p[0]), np.zeros_like(p[1])]
    d_hybrid = np.zeros_like(hybrid)

    # classification term, averaged over the two views
    ce_vals = []
    for v in (0, 1):
        target = hybrid if cfg.ce_on_hybrid else p[v]
        val, dz, dt = episode_ce_loss_grad(zq[v], y_qry, target)
        ce_vals.append(val)
        d_zq[v] += 0.5 * dz
        if cfg.ce_on_hybrid:
            d_hybrid += 0.5 * dt
        else:
            d_p[v] += 0.5 * dt
    ce = 0.5 * (ce_vals[0] + ce_vals[1])

    inter = 0.0
    if cfg.use_inter:
        inter, g1, g2 = inter_class_loss_grad(
            p[0], p[1], lc.kappa, lc.inter_include_positive
        )
        d_p[0] += lc.lambda1 * g1
        d_p[1] += lc.lambda1 * g2

    intra = 0.0
    if cfg.use_intra:
        vals = []
        for v in (0, 1):
            val, dz, dh = intra_class_loss_grad(zq[v], y_qry, hybrid, lc.tau)
            vals.append(val)
            d_zq[v] += lc.lambda2 * 0.5 * dz
            d_hybrid += lc.lambda2 * 0.5 * dh
        intra = 0.5 * (vals[0] + vals[1])

    d_p[0] += cfg.alpha * d_hybrid
    d_p[1] += (1.0 - cfg.alpha) * d_hybrid

    grads: dict[str, np.ndarray] = {}
    for v in (0, 1):
        d_zs = class_prototypes_vjp(d_p[v], y_sup, k)
        d_z = np.concatenate([d_zs, d_zq[v]])
        for key, val in enc.backward(config, params, caches[v], d_z).items():
            grads[key] = grads.get(key, 0.0) + val

    forget = 0.0
    a_replay = None
    if cfg.use_forget and replay is not None:
        rx = np.concatenate([replay.support_x, replay.query_x])
        z_r, cache_r = enc.forward(config, params, rx)
        rnk = replay.support_y.shape[0]
        zs_r, zq_r = z_r[:rnk], z_r[rnk:]
        p_r = class_prototypes(zs_r, replay.support_y, replay.n_way, replay.k_shot)
        a = prediction_matrix(zq_r, replay.query_y, p_r)
        forget, d_a = forget_loss_grad(a, replay.h, lc.delta, lc.cos_floor, lc.forget_norm)
        d_zq_r, d_pr = prediction_matrix_vjp(zq_r, replay.query_y, p_r, d_a)
        d_zs_r = class_prototypes_vjp(d_pr, replay.support_y, replay.k_shot)
        d_zr = np.concatenate([d_zs_r, d_zq_r])
        for key, val in enc.backward(config, params, cache_r, d_zr).items():
            grads[key] = grads.get(key, 0.0) + val
        a_replay = a.values

    terms = {
        "ce": ce,
        "inter": inter,
        "intra": intra,
        "forget": forget,
        "total": total_loss(ce, inter, intra, forget, lc),
    }

    # diagnostics on view 1: nearest-prototype accuracy and the episode's
    # prediction matrix that will be stored as its history
    dists = K.sqdist(zq[0], p[0])
    accuracy = float(np.mean(dists.argmin(axis=1) == y_qry))
    a_current = prediction_matrix(zq[0], y_qry, p[0]).values

    aux = {"accuracy": accuracy, "a_current": a_current, "a_replay": a_replay}
    return terms, grads, aux


def meta_train_step(
    state: enc.EncoderState,
    episode: Episode,
    cache: ReplayCache,
    cfg: TrainConfig,
    streams: dict[str, np.random.Generator],
    optimizer: SgdMomentum | None = None,
) -> StepMetrics:
    """One full optimization step; mutates state, cache, and the optimizer."""
    if optimizer is None:
        optimizer = SgdMomentum(cfg.lr, cfg.momentum, cfg.weight_decay)
    mvep = augment_episode(episode, cfg.policy, streams["augment"])

    entry = None
    if cfg.use_forget and len(cache) > 0 and state.step % cfg.cache.replay_every == 0:
        entry = cache.sample_for_replay(streams["replay"])
    replay = ReplayTask.from_entry(entry) if entry is not None else None

    terms, grads, aux = episode_objective(state.config, state.params, mvep, replay, cfg)
    for name, value in terms.items():
        if not np.isfinite(value):
            raise DivergenceError(f"loss term {name!r} became non-finite: {value}")

    optimizer.step(state.params, grads)
    state.step += 1

    if entry is not None and cfg.cache.update_h_on_replay:
        cache.refresh(entry.episode_id, aux["a_replay"], state.step)
    cache.push(CacheEntry(mvep.episode_id, mvep, aux["a_current"], stage=state.step))

    return StepMetrics(
        step=state.step,
        ce=terms["ce"],
        inter=terms["inter"],
        intra=terms["intra"],
        forget=terms["forget"],
        total=terms["total"],
        accuracy=aux["accuracy"],
        cache_size=len(cache),
    )


@dataclass
class TrainResult:
    final_state: enc.EncoderState
    best_state: enc.EncoderState
    best_val_accuracy: float
    metrics: list[StepMetrics]
    val_history: list[tuple[int, float]]


def meta_train(
    cfg: TrainConfig,
    base_split: DatasetSplit,
    val_split: DatasetSplit | None,
    init: enc.EncoderState,
    out_dir=None,
    resume_from=None,
) -> TrainResult:
    """Episodic training with per-epoch validation and best-state tracking."""
    from .evaluation import evaluate

    if base_split.role != "base":
        raise InvalidArgument(f"training split must have role 'base', got {base_split.role!r}")

    streams = spawn_streams(cfg.seed)
    state = init.copy()
    optimizer = SgdMomentum(cfg.lr, cfg.momentum, cfg.weight_decay)
    cache = ReplayCache(cfg.cache)
    metrics: list[StepMetrics] = []
    val_history: list[tuple[int, float]] = []
    best_state = init.copy()
    best_val = -1.0
    start_epoch = 0

    if resume_from is not None:
        snap = load_train_checkpoint(resume_from, state.config)
        state = snap["state"]
        optimizer.velocity = snap["velocity"]
        cache = snap["cache"]
        streams = snap["streams"]
        start_epoch = snap["epoch"]
        best_state = snap["best_state"]
        best_val = snap["best_val"]
        val_history = snap["val_history"]

    log_handle = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        mode = "a" if resume_from is not None else "w"
        log_handle = open(os.path.join(out_dir, "metrics.jsonl"), mode)

    try:
        for epoch in range(start_epoch, cfg.epochs):
            for _ in range(cfg.episodes_per_epoch):
                episode = sample_episode(
                    base_split, cfg.n_way, cfg.k_shot, cfg.q_query, streams["sampling"]
                )
                m = meta_train_step(state, episode, cache, cfg, streams, optimizer)
                metrics.append(m)
                if log_handle is not None:
                    log_handle.write(m.to_json_line() + "\n")
            if val_split is not None and cfg.val_episodes > 0:
                report = evaluate(
                    state,
                    val_split,
                    cfg.n_way,
                    cfg.k_shot,
                    cfg.q_query,
                    cfg.val_episodes,
                    streams["val"],
                )
                val_history.append((epoch, report.mean_accuracy))
                if report.mean_accuracy > best_val:
                    best_val = report.mean_accuracy
                    best_state = state.copy()
            if out_dir is not None:
                save_train_checkpoint(
                    os.path.join(out_dir, "latest.npz"),
                    cfg, state, optimizer, cache, streams, epoch + 1,
                    best_state, best_val, val_history,
                )
    finally:
        if log_handle is not None:
            log_handle.close()

    if best_val < 0:
        best_state = state.copy()
    if out_dir is not None:
        enc.save_encoder_checkpoint(os.path.join(out_dir, "best_encoder.npz"), best_state)
    return TrainResult(state, best_state, best_val, metrics, val_history)


# ---------------------------------------------------------------------------
# training checkpoints (exact resume)
# ---------------------------------------------------------------------------


def save_train_checkpoint(
    path, cfg, state, optimizer, cache, streams, epoch, best_state, best_val, val_history
) -> None:
    cfg_dict = asdict(cfg)
    cfg_dict["policy"] = policy_to_dict(cfg.policy)
    meta = {
        "format": enc.CHECKPOINT_FORMAT,
        "version": enc.CHECKPOINT_VERSION,
        "kind": "train",
        "train_config": cfg_dict,
        "encoder_config": asdict(state.config),
        "step": state.step,
        "epoch": epoch,
        "best_val": best_val,
        "val_history": val_history,
        "streams": {k: rng_state(v) for k, v in streams.items()},
        "cache_meta": [
            {
                "episode_id": e.episode_id,
                "stage": e.stage,
                "n_way": e.episode.view1.n_way,
                "k_shot": e.episode.view1.k_shot,
                "q_query": e.episode.view1.q_query,
            }
            for e in cache.entries
        ],
    }
    arrays = {f"param:{k}": v for k, v in state.params.items()}
    arrays.update({f"best:{k}": v for k, v in best_state.params.items()})
    arrays.update({f"vel:{k}": v for k, v in optimizer.velocity.items()})
    for i, e in enumerate(cache.entries):
        for tag, view in (("v1", e.episode.view1), ("v2", e.episode.view2)):
            arrays[f"cache{i}:{tag}_sx"] = view.support_x
            arrays[f"cache{i}:{tag}_qx"] = view.query_x
        arrays[f"cache{i}:sy"] = e.episode.view1.support_y
        arrays[f"cache{i}:qy"] = e.episode.view1.query_y
        arrays[f"cache{i}:h"] = e.h
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_train_checkpoint(path, expected_encoder_config=None) -> dict:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format") != enc.CHECKPOINT_FORMAT or meta.get("kind") != "train":
            raise CheckpointError(f"not a training checkpoint: {path}")
        cfg_dict = dict(meta["encoder_config"])
        cfg_dict["input_shape"] = tuple(cfg_dict["input_shape"])
        config = enc.EncoderConfig(**cfg_dict)
        if expected_encoder_config is not None and asdict(expected_encoder_config) != asdict(config):
            raise CheckpointError("checkpoint encoder config mismatch")
        params = {k[6:]: data[k] for k in data.files if k.startswith("param:")}
        best_params = {k[5:]: data[k] for k in data.files if k.startswith("best:")}
        velocity = {k[4:]: data[k] for k in data.files if k.startswith("vel:")}
        state = enc.EncoderState(config, params, int(meta["step"]))
        best_state = enc.EncoderState(config, best_params, int(meta["step"]))

        tcfg_dict = meta["train_config"]
        cache = ReplayCache(CacheConfig(**tcfg_dict["cache"]))
        for i, em in enumerate(meta["cache_meta"]):
            views = []
            for tag in ("v1", "v2"):
                views.append(
                    Episode(
                        em["episode_id"],
                        data[f"cache{i}:{tag}_sx"],
                        data[f"cache{i}:sy"],
                        data[f"cache{i}:{tag}_qx"],
                        data[f"cache{i}:qy"],
                        em["n_way"],
                        em["k_shot"],
                        em["q_query"],
                    )
                )
            mv = MultiViewEpisode(em["episode_id"], views[0], views[1])
            cache.push(CacheEntry(em["episode_id"], mv, data[f"cache{i}:h"], em["stage"]))
        streams = {k: restore_rng(v) for k, v in meta["streams"].items()}
    return {
        "state": state,
        "best_state": best_state,
        "velocity": velocity,
        "cache": cache,
        "streams": streams,
        "epoch": int(meta["epoch"]),
        "best_val": float(meta["best_val"]),
        "val_history": [tuple(t) for t in meta["val_history"]],
    }


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


def grad_check(
    state: enc.EncoderState,
    episode: Episode,
    cfg: TrainConfig,
    eps: float = 1e-5,
    num_coords: int = 200,
    rng: np.random.Generator | None = None,
) -> float:
    """Max mismatch between analytic and central-difference param gradients.

    The episode is augmented once and frozen; when the forgetting term is
    enabled the same view-1 arrays double as the replayed episode with a
    random constant history matrix, so every term's gradient path is
    exercised. The returned error is ``|analytic - numeric|`` relative to
    ``max(|analytic|, |numeric|, 1e-3)`` over a random subset of at least
    ``num_coords`` parameter coordinates.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    mvep = augment_episode(episode, cfg.policy, rng)
    replay = None
    if cfg.use_forget:
        v = mvep.view1
        h = rng.uniform(0.05, 0.95, size=(v.n_way, v.q_query))
        replay = ReplayTask(v.support_x, v.support_y, v.query_x, v.query_y, v.n_way, v.k_shot, h)

    params = {k: v.copy() for k, v in state.params.items()}
    _, grads, _ = episode_objective(state.config, params, mvep, replay, cfg)

    keys = sorted(params)
    sizes = [params[k].size for k in keys]
    total = int(np.sum(sizes))
    count = min(num_coords, total)
    coords = rng.choice(total, size=count, replace=False)

    def value_at(p):
        terms, _, _ = episode_objective(state.config, p, mvep, replay, cfg)
        return terms["total"]

    offsets = np.cumsum([0] + sizes)
    max_err = 0.0
    for flat_idx in coords:
        ki = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        key = keys[ki]
        local = int(flat_idx - offsets[ki])
        multi = np.unravel_index(local, params[key].shape)

        orig = params[key][multi]
        params[key][multi] = orig + eps
        up = value_at(params)
        params[key][multi] = orig - eps
        down = value_at(params)
        params[key][multi] = orig

        numeric = (up - down) / (2.0 * eps)
        analytic = grads[key][multi]
        denom = max(abs(analytic), abs(numeric), 1e-3)
        max_err = max(max_err, abs(analytic - numeric) / denom)
    return max_err

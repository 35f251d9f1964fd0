"""Multimodal risk network: per-modality branches, average fusion, Cox head.

Every branch is one fully connected layer with ReLU and (at train time)
inverted dropout. Non-SAPS branch outputs are element-wise averaged and the
average is concatenated with the SAPS hidden vector; a linear head maps the
fused vector to the scalar risk psi. Training minimizes the within-batch Cox
loss with Adam, early-stops on validation loss, and restores the best
validation epoch. Upstream text/image encoders are out of scope: bundles
carry their precomputed embeddings.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import asdict, dataclass, replace

import numpy as np

from .autodiff import (
    AdamState,
    ComputationTape,
    ShapeError,
    adam_step,
    backward,
    forward,
    glorot_uniform,
)
from .survival import Cohort, LikelihoodError, cox_nll

__all__ = [
    "ConfigError",
    "FeatureBundle",
    "BranchSpec",
    "TrainConfig",
    "TrainingLog",
    "FusionNetwork",
    "FeatureCohort",
    "MODALITY_ORDER",
    "DEFAULT_DIMS",
    "VARIANTS",
    "fuse",
    "model_variant",
    "make_branch_specs",
    "build_fusion_tape",
    "init_fusion_params",
    "risk_mask_and_selector",
    "arrays_from_bundles",
    "predict_risk",
    "predict_risks",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]


class ConfigError(ValueError):
    """A model or training configuration that cannot be run."""


MODALITY_ORDER = ("saps", "labels", "text", "image", "gcn")

DEFAULT_DIMS = {"saps": 15, "labels": 14, "text": 768, "image": 1024, "gcn": 224}

_DEFAULT_OUT = {"saps": 15, "labels": 14, "text": 32, "image": 32, "gcn": 32}

VARIANTS = {
    "saps_scores": (),
    "saps_risk_factors": ("saps",),
    "saps+labels": ("saps", "labels"),
    "saps+transformer": ("saps", "text"),
    "saps+gcn": ("saps", "gcn"),
    "saps+image": ("saps", "image"),
    "multimodal_text_image": ("saps", "text", "image"),
    "multimodal_gcn_image": ("saps", "gcn", "image"),
}


def model_variant(name: str) -> tuple:
    """Branch set for a named experiment.

    "saps_scores" returns an empty set: that variant ranks patients by the
    raw SAPS-II total and trains nothing.
    """
    try:
        return VARIANTS[name]
    except KeyError:
        raise ConfigError(
            f"unknown variant {name!r}; valid names: {', '.join(sorted(VARIANTS))}"
        ) from None


@dataclass(frozen=True)
class FeatureBundle:
    """Per-patient model inputs; absent modalities stay None.

    saps is the 15-vector of risk-factor points, labels the 14 finding flags,
    text/image the upstream encoder embeddings (768/1024), gcn the flattened
    GCN hidden state (224).
    """

    saps: np.ndarray
    labels: np.ndarray | None = None
    text: np.ndarray | None = None
    image: np.ndarray | None = None
    gcn: np.ndarray | None = None

    def __post_init__(self):
        for name in MODALITY_ORDER:
            value = getattr(self, name)
            if value is None:
                if name == "saps":
                    raise ValueError("saps features are required")
                continue
            arr = np.asarray(value, dtype=np.float64).reshape(-1)
            if arr.shape[0] != DEFAULT_DIMS[name]:
                raise ValueError(
                    f"{name} must have {DEFAULT_DIMS[name]} entries, got {arr.shape[0]}"
                )
            if not np.isfinite(arr).all():
                raise ValueError(f"{name} features must be finite")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def get(self, name: str) -> np.ndarray | None:
        if name not in MODALITY_ORDER:
            raise ValueError(f"unknown modality {name!r}")
        return getattr(self, name)


@dataclass(frozen=True)
class BranchSpec:
    name: str
    in_dim: int
    out_dim: int
    activation: str = "relu"
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.name not in MODALITY_ORDER:
            raise ConfigError(f"unknown branch name {self.name!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigError(f"{self.name}: dimensions must be positive")
        if self.activation != "relu":
            raise ConfigError(f"{self.name}: only relu branches are supported")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"{self.name}: dropout_rate must be in [0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 250
    batch_size: int = 72
    dropout: float = 0.5
    learning_rate: float = 0.001
    early_stop_patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be positive")
        if self.epochs > 0 and self.early_stop_patience > self.epochs:
            raise ConfigError("early_stop_patience cannot exceed epochs")


@dataclass
class TrainingLog:
    """Per-epoch train/validation losses plus where early stopping landed."""

    epochs: list = None
    best_epoch: int = 0
    stopped_early: bool = False

    def __post_init__(self):
        if self.epochs is None:
            self.epochs = []

    def add(self, epoch: int, train_loss: float, val_loss: float) -> None:
        self.epochs.append(
            {"epoch": epoch, "train_loss": float(train_loss), "val_loss": float(val_loss)}
        )


def make_branch_specs(modalities, dropout_rate: float = 0.5, dims=None) -> dict:
    """Default BranchSpec per modality; `dims` overrides (in_dim, out_dim) pairs."""
    modalities = tuple(modalities)
    if not modalities:
        raise ConfigError("modality set is empty; nothing to train")
    if "saps" not in modalities:
        raise ConfigError("every fusion variant includes the saps branch")
    unknown = set(modalities) - set(MODALITY_ORDER)
    if unknown:
        raise ConfigError(f"unknown modalities: {sorted(unknown)}")
    specs = {}
    for name in modalities:
        in_dim, out_dim = DEFAULT_DIMS[name], _DEFAULT_OUT[name]
        if dims and name in dims:
            in_dim, out_dim = dims[name]
        specs[name] = BranchSpec(name, in_dim, out_dim, dropout_rate=dropout_rate)
    averaged = [s.out_dim for n, s in specs.items() if n != "saps"]
    if averaged and len(set(averaged)) != 1:
        raise ConfigError(
            f"averaged branches need equal out_dims, got {sorted(set(averaged))}"
        )
    return specs


def _ordered(modalities) -> tuple:
    return tuple(m for m in MODALITY_ORDER if m in set(modalities))


def fused_dim(specs: dict) -> int:
    non_saps = [s.out_dim for n, s in specs.items() if n != "saps"]
    base = specs["saps"].out_dim
    return base + non_saps[0] if non_saps else base


def fuse(hidden, saps_hidden) -> np.ndarray:
    """Element-wise mean of the hidden vectors, concatenated before saps_hidden."""
    saps_hidden = np.asarray(saps_hidden, dtype=np.float64)
    hidden = [np.asarray(h, dtype=np.float64) for h in hidden]
    if not hidden:
        return saps_hidden.copy()
    first = hidden[0].shape
    for h in hidden[1:]:
        if h.shape != first:
            raise ShapeError(f"averaged shapes differ: {first} vs {h.shape}")
    return np.concatenate([np.mean(hidden, axis=0), saps_hidden], axis=-1)


@dataclass
class FusionNetwork:
    """Frozen parameter store plus the configuration that shaped it."""

    modalities: tuple
    specs: dict
    params: dict
    config: TrainConfig

    def __post_init__(self):
        self.modalities = _ordered(self.modalities)
        head_in = self.params["w_head"].shape[0]
        if head_in != fused_dim(self.specs):
            raise ShapeError(
                f"head expects {self.params['w_head'].shape[0]} inputs, fused dim is {fused_dim(self.specs)}"
            )

    def predict_risk(self, bundle: FeatureBundle) -> float:
        return float(self.predict_risks([bundle])[0])

    def predict_risks(self, bundles) -> np.ndarray:
        arrays = arrays_from_bundles(bundles, self.modalities, self.specs)
        return _psi(self.params, self.modalities, arrays)


def arrays_from_bundles(bundles, modalities, specs=None) -> dict:
    """Stack bundle fields into (n, dim) matrices, one per configured modality."""
    bundles = list(bundles)
    if not bundles:
        raise ValueError("no bundles given")
    out = {}
    for name in _ordered(modalities):
        rows = []
        for i, b in enumerate(bundles):
            v = b.get(name)
            if v is None:
                raise ValueError(f"bundle {i} is missing configured modality {name!r}")
            rows.append(v)
        mat = np.vstack(rows)
        if specs is not None and mat.shape[1] != specs[name].in_dim:
            raise ShapeError(
                f"{name} features have width {mat.shape[1]}, branch expects {specs[name].in_dim}"
            )
        out[name] = mat
    return out


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _psi(params: dict, modalities, arrays: dict) -> np.ndarray:
    """Eval-mode risk scores (dropout off)."""
    hidden = {
        m: _relu(arrays[m] @ params[f"w_{m}"] + params[f"b_{m}"]) for m in modalities
    }
    non_saps = [hidden[m] for m in modalities if m != "saps"]
    fused = fuse(non_saps, hidden["saps"])
    return (fused @ params["w_head"] + params["b_head"]).reshape(-1)


def init_fusion_params(specs: dict, modalities, seed) -> dict:
    """Glorot-uniform weights and zero biases for every branch plus the head."""
    rng = np.random.default_rng(seed)
    params = {}
    for name in _ordered(modalities):
        s = specs[name]
        params[f"w_{name}"] = glorot_uniform(rng, (s.in_dim, s.out_dim))
        params[f"b_{name}"] = np.zeros((1, s.out_dim))
    params["w_head"] = glorot_uniform(rng, (fused_dim(specs), 1))
    params["b_head"] = np.zeros((1, 1))
    return params


def build_fusion_tape(modalities) -> ComputationTape:
    """Training tape: branches, fusion, head, and the within-batch Cox loss.

    Binding shapes for batch size B with E events: x_<m> (B, in_dim),
    w_<m> (in_dim, out_dim), b_<m> (1, out_dim), drop_<m> (B, out_dim) of
    inverted-dropout factors, w_head (fused, 1), b_head (1, 1),
    risk_mask (E, B), event_selector (E, B), neg_inv_events (1, 1) holding
    -1/E. Outputs: "psi" (B, 1) and scalar "loss".
    """
    modalities = _ordered(modalities)
    if "saps" not in modalities:
        raise ConfigError("every fusion variant includes the saps branch")
    tape = ComputationTape()
    hidden = {}
    for m in modalities:
        x = tape.input(f"x_{m}")
        w = tape.input(f"w_{m}", trainable=True)
        b = tape.input(f"b_{m}", trainable=True)
        drop = tape.input(f"drop_{m}")
        pre = tape.add(tape.matmul(x, w), b)
        hidden[m] = tape.mul(tape.relu(pre), drop, name=f"h_{m}")
    non_saps = [hidden[m] for m in modalities if m != "saps"]
    if non_saps:
        avg = tape.average(non_saps, name="avg") if len(non_saps) > 1 else non_saps[0]
        fused = tape.concat([avg, hidden["saps"]], name="fused")
    else:
        fused = hidden["saps"]
    w_head = tape.input("w_head", trainable=True)
    b_head = tape.input("b_head", trainable=True)
    psi = tape.output(tape.add(tape.matmul(fused, w_head), b_head, name="psi"))
    mask = tape.input("risk_mask")
    selector = tape.input("event_selector")
    neg_inv = tape.input("neg_inv_events")
    lse = tape.masked_logsumexp(psi, mask)
    terms = tape.add(tape.matmul(selector, psi), tape.scale(lse, -1.0))
    tape.output(tape.mul(tape.sum(terms), neg_inv, name="loss"))
    return tape


def risk_mask_and_selector(times, events):
    """(E, n) risk-set mask and event-row selector for the within-batch loss."""
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events)
    ev_idx = np.flatnonzero(events == 1)
    if ev_idx.size == 0:
        raise LikelihoodError("batch has no events; Cox loss undefined")
    mask = (times[None, :] >= times[ev_idx][:, None]).astype(np.float64)
    selector = np.zeros((ev_idx.size, times.size))
    selector[np.arange(ev_idx.size), ev_idx] = 1.0
    return mask, selector


@dataclass(frozen=True)
class FeatureCohort:
    """A cohort and its aligned feature bundles."""

    cohort: Cohort
    bundles: tuple

    def __post_init__(self):
        bundles = tuple(self.bundles)
        if len(bundles) != self.cohort.n:
            raise ValueError(
                f"{len(bundles)} bundles for a cohort of {self.cohort.n}"
            )
        object.__setattr__(self, "bundles", bundles)

    @property
    def n(self) -> int:
        return self.cohort.n

    def take(self, indices) -> "FeatureCohort":
        """Row subset; repeated indices get a `~k` id suffix to stay unique."""
        indices = list(indices)
        seen = {}
        records = []
        for i in indices:
            rec = self.cohort.records[i]
            k = seen.get(rec.patient_id, 0)
            seen[rec.patient_id] = k + 1
            pid = rec.patient_id if k == 0 else f"{rec.patient_id}~{k}"
            records.append(replace(rec, patient_id=pid))
        return FeatureCohort(
            cohort=Cohort(records), bundles=tuple(self.bundles[i] for i in indices)
        )


def predict_risk(net: FusionNetwork, bundle: FeatureBundle) -> float:
    return net.predict_risk(bundle)


def predict_risks(net: FusionNetwork, bundles) -> np.ndarray:
    return net.predict_risks(bundles)


def _dropout_factors(rng, shape, rate) -> np.ndarray:
    if rate == 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= rate) / (1.0 - rate)


def train(
    train_set: FeatureCohort,
    val_set: FeatureCohort,
    modalities,
    config: TrainConfig | None = None,
    specs: dict | None = None,
):
    """Fit the fusion network; returns (network, log).

    Mini-batches are reshuffled every epoch; a batch that draws no events is
    skipped. Validation loss is the eval-mode Cox loss over the whole
    validation set; training stops once it fails to improve for
    `early_stop_patience` consecutive epochs and the best epoch's parameters
    are restored.
    """
    if config is None:
        config = TrainConfig()
    modalities = _ordered(modalities)
    if not modalities:
        raise ConfigError("modality set is empty; nothing to train")
    if specs is None:
        specs = make_branch_specs(modalities, dropout_rate=config.dropout)
    if train_set.cohort.num_events == 0:
        raise LikelihoodError("training set has no events")
    if val_set.cohort.num_events == 0:
        raise LikelihoodError("validation set has no events")

    train_arrays = arrays_from_bundles(train_set.bundles, modalities, specs)
    val_arrays = arrays_from_bundles(val_set.bundles, modalities, specs)

    params = init_fusion_params(specs, modalities, seed=[config.seed, 0])
    log = TrainingLog()
    if config.epochs == 0:
        return FusionNetwork(modalities, specs, params, config), log

    tape = build_fusion_tape(modalities)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    drop_rng = np.random.default_rng([config.seed, 2])
    state = AdamState(learning_rate=config.learning_rate)

    n = train_set.n
    times = train_set.cohort.times
    events = train_set.cohort.events
    best_loss = np.inf
    best_params = {k: v.copy() for k, v in params.items()}
    best_epoch = 0
    bad_epochs = 0

    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        batch_losses = []
        for start in range(0, n, config.batch_size):
            rows = order[start : start + config.batch_size]
            if events[rows].sum() == 0:
                continue
            mask, selector = risk_mask_and_selector(times[rows], events[rows])
            bindings = {
                "risk_mask": mask,
                "event_selector": selector,
                "neg_inv_events": [[-1.0 / mask.shape[0]]],
                "w_head": params["w_head"],
                "b_head": params["b_head"],
            }
            for m in modalities:
                s = specs[m]
                bindings[f"x_{m}"] = train_arrays[m][rows]
                bindings[f"w_{m}"] = params[f"w_{m}"]
                bindings[f"b_{m}"] = params[f"b_{m}"]
                bindings[f"drop_{m}"] = _dropout_factors(
                    drop_rng, (rows.size, s.out_dim), s.dropout_rate
                )
            run = forward(tape, bindings)
            batch_losses.append(float(run.array("loss")[0, 0]))
            grads = backward(run, "loss")
            stepped, state = adam_step(state, params, grads)
            params = {k: v.values for k, v in stepped.items()}
        val_loss = cox_nll(_psi(params, modalities, val_arrays), val_set.cohort)
        train_loss = float(np.mean(batch_losses)) if batch_losses else np.nan
        log.add(epoch, train_loss, val_loss)
        if val_loss < best_loss:
            best_loss = val_loss
            best_params = {k: v.copy() for k, v in params.items()}
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.early_stop_patience:
                log.stopped_early = True
                break

    log.best_epoch = best_epoch
    net = FusionNetwork(modalities, specs, best_params, config)
    return net, log


# -- checkpoints ---------------------------------------------------------------

_CHECKPOINT_VERSION = 1


def _params_digest(params: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_checkpoint(net: FusionNetwork, path) -> None:
    """Write the network as versioned JSON with a sha256 parameter checksum."""
    payload = {
        "format_version": _CHECKPOINT_VERSION,
        "kind": "fusion_checkpoint",
        "modalities": list(net.modalities),
        "specs": [asdict(net.specs[m]) for m in net.modalities],
        "config": asdict(net.config),
        "params": {
            name: {
                "shape": list(arr.shape),
                "dtype": "<f8",
                "data": base64.b64encode(
                    np.ascontiguousarray(arr, dtype="<f8").tobytes()
                ).decode("ascii"),
            }
            for name, arr in sorted(net.params.items())
        },
        "checksum": _params_digest(net.params),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> FusionNetwork:
    """Read a checkpoint; corruption shows up as a checksum or format error."""
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("kind") != "fusion_checkpoint":
        raise ValueError("not a fusion checkpoint file")
    if payload.get("format_version") != _CHECKPOINT_VERSION:
        raise ValueError(
            f"unsupported checkpoint version {payload.get('format_version')!r}"
        )
    params = {}
    for name, entry in payload["params"].items():
        raw = base64.b64decode(entry["data"])
        params[name] = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).copy()
    if _params_digest(params) != payload["checksum"]:
        raise ValueError("checkpoint checksum mismatch; file is corrupt")
    specs = {d["name"]: BranchSpec(**d) for d in payload["specs"]}
    return FusionNetwork(
        modalities=tuple(payload["modalities"]),
        specs=specs,
        params=params,
        config=TrainConfig(**payload["config"]),
    )

"""Minimal feed-forward model family for calibration and merge experiments.

Models are stacks of embedding / linear / relu layers with a per-layer
frozen flag, parameters stored as an ordinary checkpoint under canonical
names ("embed.weight", "layers.<i>.weight", "layers.<i>.bias"). This is
deliberately tiny: linear layers are the only structure the saliency
machinery needs, and a frozen front block stands in for transplanted
modules such as a vision encoder.

Also provides the direct evaluator of the per-layer objective
|| delta_W @ X ||_F^2 (the oracle the saliency approximation is checked
against), least-squares experts with closed-form task losses, and planted
perturbations with known ground-truth retention sets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ShapeMismatch, ValidationError
from .saliency import ActivationStats, accumulate_stats
from .task_vectors import RoutingRule
from .tensor_store import Checkpoint, Tensor, read_checkpoint

# Count of forward passes executed in this process; merge runs snapshot it
# to demonstrate that cached stats imply zero forward work.
FORWARD_PASSES = 0


@dataclass(frozen=True)
class Embedding:
    rows: int
    dim: int
    frozen: bool = False


@dataclass(frozen=True)
class Linear:
    in_dim: int
    out_dim: int
    bias: bool = True
    frozen: bool = False


@dataclass(frozen=True)
class Relu:
    pass


LayerSpec = Embedding | Linear | Relu


@dataclass(frozen=True)
class CalibrationSet:
    """Token-id sequences or dense vectors, one record per sample."""

    kind: str  # "tokens" or "vec"
    records: tuple[np.ndarray, ...]

    @property
    def count(self) -> int:
        return len(self.records)

    def token_ids(self) -> np.ndarray:
        if self.kind != "tokens":
            raise ValidationError("calibration set holds vectors, not token ids")
        if not self.records:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(self.records)

    def matrix(self) -> np.ndarray:
        if self.kind != "vec":
            raise ValidationError("calibration set holds token ids, not vectors")
        if not self.records:
            return np.zeros((0, 0), dtype=np.float32)
        return np.stack(self.records).astype(np.float32)


def load_calibration(path: str | Path) -> CalibrationSet:
    """Parse a JSONL calibration file of {"tokens": [...]} or {"vec": [...]}."""
    kind: str | None = None
    records: list[np.ndarray] = []
    for lineno, line in enumerate(Path(path).read_text("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"'{path}' line {lineno}: not valid JSON: {exc}") from exc
        if not isinstance(record, dict) or len(record) != 1:
            raise ValidationError(f"'{path}' line {lineno}: expected one 'tokens' or 'vec' field")
        key, payload = next(iter(record.items()))
        if key == "tokens":
            values = np.asarray(payload, dtype=np.int64)
        elif key == "vec":
            values = np.asarray(payload, dtype=np.float32)
        else:
            raise ValidationError(f"'{path}' line {lineno}: unknown record kind '{key}'")
        if kind is None:
            kind = key
        elif kind != key:
            raise ValidationError(f"'{path}' line {lineno}: mixed record kinds")
        records.append(values)
    return CalibrationSet(kind or "vec", tuple(records))


def save_calibration(cal: CalibrationSet, path: str | Path) -> None:
    lines = []
    for record in cal.records:
        if cal.kind == "tokens":
            lines.append(json.dumps({"tokens": [int(t) for t in record]}))
        else:
            lines.append(json.dumps({"vec": [float(v) for v in record]}))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), "utf-8")


def random_token_set(rows: int, count: int = 128, length: int = 4, seed: int = 0) -> CalibrationSet:
    rng = np.random.default_rng(seed)
    records = tuple(rng.integers(0, rows, size=length, dtype=np.int64) for _ in range(count))
    return CalibrationSet("tokens", records)


def random_vector_set(dim: int, count: int = 128, seed: int = 0, scale: float = 1.0) -> CalibrationSet:
    rng = np.random.default_rng(seed)
    records = tuple(
        (scale * rng.standard_normal(dim)).astype(np.float32) for _ in range(count)
    )
    return CalibrationSet("vec", records)


def whitened_inputs(dim: int, count: int, scales: Sequence[float], seed: int = 0) -> np.ndarray:
    """Token-major matrix whose feature columns are mutually orthogonal.

    Column j has squared norm scales[j]^2, so X^T X is diagonal; this
    turns the saliency total into an exact equality with the layer loss.
    """
    if len(scales) != dim:
        raise ValidationError(f"need {dim} scales, got {len(scales)}")
    if count < dim:
        raise ValidationError("whitened inputs need at least as many tokens as features")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((count, count)))
    return (q[:, :dim] * np.asarray(scales, dtype=np.float64)).astype(np.float32)


class ToyModel:
    """A layer stack bound to a parameter checkpoint."""

    def __init__(self, layers: Sequence[LayerSpec], params: Checkpoint):
        self.layers = tuple(layers)
        self.params = params
        self._validate()

    def _validate(self) -> None:
        width: int | None = None
        for index, layer in enumerate(self.layers):
            if isinstance(layer, Embedding):
                if index != 0:
                    raise ValidationError("embedding must be the first layer")
                width = layer.dim
            elif isinstance(layer, Linear):
                if width is not None and width != layer.in_dim:
                    raise ValidationError(
                        f"layer {index} expects width {layer.in_dim}, previous layer yields {width}"
                    )
                width = layer.out_dim
        for name in self.param_names():
            if name not in self.params:
                raise ValidationError(f"parameter checkpoint is missing '{name}'")

    # -- canonical parameter naming -------------------------------------

    def param_names(self) -> tuple[str, ...]:
        names: list[str] = []
        for index, layer in enumerate(self.layers):
            if isinstance(layer, Embedding):
                names.append("embed.weight")
            elif isinstance(layer, Linear):
                names.append(f"layers.{index}.weight")
                if layer.bias:
                    names.append(f"layers.{index}.bias")
        return tuple(names)

    def frozen_param_names(self) -> tuple[str, ...]:
        names: list[str] = []
        for index, layer in enumerate(self.layers):
            if isinstance(layer, Embedding) and layer.frozen:
                names.append("embed.weight")
            elif isinstance(layer, Linear) and layer.frozen:
                names.append(f"layers.{index}.weight")
                if layer.bias:
                    names.append(f"layers.{index}.bias")
        return tuple(names)

    def frozen_routing(self, donor_id: str) -> list[RoutingRule]:
        """copy_from rules pinning every frozen parameter to one donor."""
        import re

        return [
            RoutingRule(re.escape(name), "copy_from", donor_id)
            for name in self.frozen_param_names()
        ]

    def linear_layer_keys(self) -> tuple[str, ...]:
        return tuple(
            f"layers.{i}" for i, layer in enumerate(self.layers) if isinstance(layer, Linear)
        )

    def last_linear_index(self) -> int:
        for index in range(len(self.layers) - 1, -1, -1):
            if isinstance(self.layers[index], Linear):
                return index
        raise ValidationError("model has no linear layer")

    # -- construction ----------------------------------------------------

    @classmethod
    def build(cls, layers: Sequence[LayerSpec], seed: int = 0) -> "ToyModel":
        rng = np.random.default_rng(seed)
        tensors: list[Tensor] = []
        for index, layer in enumerate(layers):
            if isinstance(layer, Embedding):
                weight = rng.standard_normal((layer.rows, layer.dim)) / np.sqrt(layer.dim)
                tensors.append(Tensor("embed.weight", weight.astype(np.float32)))
            elif isinstance(layer, Linear):
                weight = rng.standard_normal((layer.out_dim, layer.in_dim)) / np.sqrt(layer.in_dim)
                tensors.append(Tensor(f"layers.{index}.weight", weight.astype(np.float32)))
                if layer.bias:
                    tensors.append(
                        Tensor(f"layers.{index}.bias", np.zeros(layer.out_dim, np.float32))
                    )
        return cls(layers, Checkpoint(tensors))

    def with_params(self, params: Checkpoint) -> "ToyModel":
        return ToyModel(self.layers, params)

    # -- inference --------------------------------------------------------

    def forward(
        self,
        batch: CalibrationSet | np.ndarray,
        collect: ActivationStats | None = None,
        trace: dict[str, np.ndarray] | None = None,
    ) -> np.ndarray:
        """Propagate a batch; optionally accumulate per-layer input stats.

        Token batches require an embedding first layer; every token
        becomes one row flowing through the linear stack. ``trace``
        captures each linear layer's input matrix under its layer key.
        """
        global FORWARD_PASSES
        FORWARD_PASSES += 1
        x = self._entry_matrix(batch)
        start = 1 if isinstance(self.layers[0], Embedding) else 0
        for index in range(start, len(self.layers)):
            layer = self.layers[index]
            if isinstance(layer, Linear):
                if x.shape[1] != layer.in_dim:
                    raise ShapeMismatch(
                        f"layer {index} expects width {layer.in_dim}, got {x.shape[1]}"
                    )
                key = f"layers.{index}"
                if collect is not None:
                    accumulate_stats(collect, key, x)
                if trace is not None:
                    trace[key] = x.copy()
                weight = self.params[f"layers.{index}.weight"].data
                x = x @ weight.T
                if layer.bias:
                    x = x + self.params[f"layers.{index}.bias"].data
            elif isinstance(layer, Relu):
                x = np.maximum(x, np.float32(0))
            else:
                raise ValidationError("embedding allowed only as the first layer")
        return x

    def _entry_matrix(self, batch: CalibrationSet | np.ndarray) -> np.ndarray:
        first = self.layers[0]
        if isinstance(batch, CalibrationSet):
            if batch.count == 0:
                raise ValidationError("no calibration coverage: empty calibration set")
            payload = batch.token_ids() if batch.kind == "tokens" else batch.matrix()
        else:
            payload = np.asarray(batch)
        if isinstance(first, Embedding):
            if not np.issubdtype(payload.dtype, np.integer):
                raise ValidationError("embedding-first model needs token-id input")
            ids = payload.ravel()
            if ids.size and (ids.min() < 0 or ids.max() >= first.rows):
                raise ValidationError(
                    f"token id out of range for embedding with {first.rows} rows"
                )
            return self.params["embed.weight"].data[ids]
        matrix = payload.astype(np.float32, copy=False)
        if matrix.ndim != 2:
            raise ShapeMismatch(f"expected a 2-D batch, got shape {matrix.shape}")
        return matrix

    # -- architecture files ----------------------------------------------

    def to_dict(self) -> dict:
        out = []
        for layer in self.layers:
            if isinstance(layer, Embedding):
                out.append(
                    {"type": "embedding", "rows": layer.rows, "dim": layer.dim, "frozen": layer.frozen}
                )
            elif isinstance(layer, Linear):
                out.append(
                    {
                        "type": "linear",
                        "in": layer.in_dim,
                        "out": layer.out_dim,
                        "bias": layer.bias,
                        "frozen": layer.frozen,
                    }
                )
            else:
                out.append({"type": "relu"})
        return {"layers": out}


def _layers_from_dict(spec: dict, where: str) -> list[LayerSpec]:
    if not isinstance(spec, dict) or not isinstance(spec.get("layers"), list):
        raise ValidationError(f"{where}: expected an object with a 'layers' list")
    layers: list[LayerSpec] = []
    for index, entry in enumerate(spec["layers"]):
        if not isinstance(entry, dict) or "type" not in entry:
            raise ValidationError(f"{where}: layers[{index}] needs a 'type'")
        kind = entry["type"]
        if kind == "embedding":
            layers.append(
                Embedding(int(entry["rows"]), int(entry["dim"]), bool(entry.get("frozen", False)))
            )
        elif kind == "linear":
            layers.append(
                Linear(
                    int(entry["in"]),
                    int(entry["out"]),
                    bool(entry.get("bias", True)),
                    bool(entry.get("frozen", False)),
                )
            )
        elif kind == "relu":
            layers.append(Relu())
        else:
            raise ValidationError(f"{where}: layers[{index}] has unknown type '{kind}'")
    return layers


def load_model(path: str | Path) -> ToyModel:
    """Read an architecture JSON; optional "params" points at a checkpoint.

    Without params the model is deterministically initialized from the
    file's "init_seed" (default 0).
    """
    path = Path(path)
    try:
        spec = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"'{path}': not valid JSON: {exc}") from exc
    layers = _layers_from_dict(spec, str(path))
    params_ref = spec.get("params")
    if params_ref is not None:
        params = read_checkpoint(path.parent / params_ref)
        return ToyModel(layers, params)
    return ToyModel.build(layers, seed=int(spec.get("init_seed", 0)))


def save_model(
    model: ToyModel,
    path: str | Path,
    params_ref: str | None = None,
    init_seed: int | None = None,
) -> None:
    spec = model.to_dict()
    if params_ref is not None:
        spec["params"] = params_ref
    if init_seed is not None:
        spec["init_seed"] = int(init_seed)
    Path(path).write_text(json.dumps(spec, indent=2) + "\n", "utf-8")


# -- the layer-wise loss oracle -------------------------------------------


def layer_loss_change(w_delta: np.ndarray, x_features: np.ndarray) -> float:
    """Exact || delta_W @ X ||_F^2 with X holding one feature per row.

    Evaluated in float64; this is the reference the saliency total is
    compared against in the whitened regime.
    """
    delta = np.asarray(w_delta, dtype=np.float64)
    x = np.asarray(x_features, dtype=np.float64)
    if delta.ndim == 1:
        delta = delta[None, :]
    if delta.shape[1] != x.shape[0]:
        raise ShapeMismatch(
            f"inner dimensions disagree: delta has {delta.shape[1]} columns, "
            f"X has {x.shape[0]} feature rows"
        )
    product = delta @ x
    return float(np.sum(product * product))


# -- least-squares experts ---------------------------------------------------


def fit_last_layer(model: ToyModel, batch, targets: np.ndarray) -> Checkpoint:
    """Closed-form expert: replace the last linear layer by its least-squares fit."""
    index = model.last_linear_index()
    layer = model.layers[index]
    assert isinstance(layer, Linear)
    trace: dict[str, np.ndarray] = {}
    model.forward(batch, trace=trace)
    phi = trace[f"layers.{index}"].astype(np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if layer.bias:
        design = np.hstack([phi, np.ones((phi.shape[0], 1))])
    else:
        design = phi
    solution, *_ = np.linalg.lstsq(design, y, rcond=None)
    tensors = []
    for name, tensor in model.params.items():
        if name == f"layers.{index}.weight":
            tensors.append(Tensor(name, solution[: layer.in_dim].T.astype(np.float32)))
        elif name == f"layers.{index}.bias" and layer.bias:
            tensors.append(Tensor(name, solution[layer.in_dim].astype(np.float32)))
        else:
            tensors.append(Tensor(name, tensor.data))
    return Checkpoint(tensors, metadata=dict(model.params.metadata))


def task_loss(model: ToyModel, batch, targets: np.ndarray) -> float:
    """Squared-error task loss || model(batch) - targets ||_F^2 in float64."""
    outputs = model.forward(batch).astype(np.float64)
    residual = outputs - np.asarray(targets, dtype=np.float64)
    return float(np.sum(residual * residual))


# -- planted perturbations ---------------------------------------------------


@dataclass(frozen=True)
class PlantedColumn:
    """One planted column: small deltas riding on a boosted input feature."""

    tensor: str
    column: int
    magnitude: float
    feature_sq_mean: float


@dataclass(frozen=True)
class PlantPlan:
    """Planted-perturbation description for a pair of experts.

    Tensors named by a site get a full background fill of
    ``background_magnitude`` (random signs) except at the planted columns,
    which carry ``magnitude``. ``planted_stats`` yields the matching
    activation statistics: every feature at ``background_sq_mean`` except
    the boosted ones.
    """

    expert_a: tuple[PlantedColumn, ...] = ()
    expert_b: tuple[PlantedColumn, ...] = ()
    background_magnitude: float = 1.0
    background_sq_mean: float = 1.0
    token_count: int = 128


def plant_experts(
    model: ToyModel, plan: PlantPlan, seed: int = 0
) -> tuple[Checkpoint, Checkpoint, dict[str, set[tuple[str, int]]]]:
    """Materialize two expert checkpoints plus ground-truth retention sets.

    Ground truth contains the planted coordinates whose saliency provably
    exceeds every background coordinate's saliency under the planted
    stats (feature_sq_mean * magnitude^2 > background product).
    """
    rng = np.random.default_rng(seed)
    experts: list[Checkpoint] = []
    truth: dict[str, set[tuple[str, int]]] = {}
    for label, sites in (("a", plan.expert_a), ("b", plan.expert_b)):
        deltas: dict[str, np.ndarray] = {}
        for site in sites:
            if site.tensor not in model.params:
                raise ValidationError(f"planted tensor '{site.tensor}' not in model")
            shape = model.params[site.tensor].shape
            if len(shape) != 2 or not (0 <= site.column < shape[1]):
                raise ValidationError(
                    f"planted column {site.column} out of range for tensor '{site.tensor}' {shape}"
                )
            if site.tensor not in deltas:
                signs = rng.choice([-1.0, 1.0], size=shape).astype(np.float32)
                deltas[site.tensor] = signs * np.float32(plan.background_magnitude)
            block = deltas[site.tensor]
            column_signs = rng.choice([-1.0, 1.0], size=shape[0]).astype(np.float32)
            block[:, site.column] = column_signs * np.float32(site.magnitude)
        tensors = []
        for name, tensor in model.params.items():
            if name in deltas:
                tensors.append(Tensor(name, tensor.data + deltas[name]))
            else:
                tensors.append(Tensor(name, tensor.data))
        experts.append(Checkpoint(tensors, metadata=dict(model.params.metadata)))
        background_score = plan.background_sq_mean * plan.background_magnitude**2
        coords: set[tuple[str, int]] = set()
        for site in sites:
            if site.feature_sq_mean * site.magnitude**2 > background_score:
                rows, cols = model.params[site.tensor].shape
                coords.update(
                    (site.tensor, r * cols + site.column) for r in range(rows)
                )
        truth[label] = coords
    return experts[0], experts[1], truth


def planted_stats(model: ToyModel, plan: PlantPlan, expert: str) -> ActivationStats:
    """Activation stats implied by a plant plan for one expert's calibration."""
    sites = plan.expert_a if expert == "a" else plan.expert_b
    boosts: dict[str, dict[int, float]] = {}
    for site in sites:
        layer = site.tensor.rsplit(".", 1)[0]
        boosts.setdefault(layer, {})[site.column] = site.feature_sq_mean
    stats = ActivationStats()
    for index, layer in enumerate(model.layers):
        if not isinstance(layer, Linear):
            continue
        key = f"layers.{index}"
        sq_mean = np.full(layer.in_dim, plan.background_sq_mean, dtype=np.float64)
        for column, value in boosts.get(key, {}).items():
            sq_mean[column] = value
        stats.set_layer(key, sq_mean * plan.token_count, plan.token_count)
    return stats

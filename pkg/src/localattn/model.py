"""Encoder-decoder forecaster with pluggable attention, training, checkpoints.

The architecture is deliberately plain: affine embedding plus sinusoidal
position signal, N encoder layers (multi-head self-attention, residual,
two width-preserving projections with LeakyReLU), N decoder layers (the
same plus a second attention block against the encoder output), a feature
projection back to the input width, and one final n -> m projection on
the time axis that turns n processed steps into m forecast steps. No
output softmax: forecasts are regression values.

Two wiring notes, both deliberate:

* The decoder consumes the same embedded input window as the encoder
  (one-shot forecasting; there is no autoregressive target stream).
* In the decoder's second attention block the queries AND keys come from
  the encoder output while the values come from the decoder stream. That
  assignment is unusual (convention projects queries from the decoder
  stream and keys/values from the encoder); ``cross_attention="conventional"``
  switches to the usual form for comparison.

The whole forward is written once against the ops backend, so the same
code runs eagerly for inference and on the autodiff tape for training.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import _multi_head, _resolve_inner
from .autodiff import Graph, Node
from .data import Scaler, WindowedDataset, mae, mse
from .lam import default_window
from .tensor import EAGER, DimensionError, Tensor

__all__ = [
    "ModelConfig",
    "ForecastModel",
    "TrainReport",
    "TrainDivergenceError",
    "positional_encoding",
    "count_parameters",
    "parameter_breakdown",
    "train",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1


def positional_encoding(n: int, d_model: int) -> Tensor:
    """Position signal PE[i, j] = sin(i / 10000^(j/d_model)) + cos(same).

    Row 0 is all ones (both terms at argument 0); every entry lies in
    [-sqrt(2), sqrt(2)]. Added to the embedded input to give the
    otherwise order-blind attention layers a notion of position.
    """
    if n < 1 or d_model < 1:
        raise ValueError(f"need n >= 1 and d_model >= 1, got n={n}, d_model={d_model}")
    i = np.arange(n, dtype=np.float64)[:, np.newaxis]
    j = np.arange(d_model, dtype=np.float64)[np.newaxis, :]
    angle = i / np.power(10000.0, j / d_model)
    return Tensor._wrap(np.sin(angle) + np.cos(angle))


@dataclass(frozen=True)
class ModelConfig:
    """Geometry and behavior switches of one forecaster.

    ``window`` only matters for kind="lam" and defaults to the
    4*ceil(log2 n) rule. ``d_head`` defaults to d_model / heads.
    """

    d_features: int
    n: int
    m: int
    d_model: int = 8
    num_layers: int = 2
    heads: int = 2
    d_head: int | None = None
    kind: str = "lam"
    window: int | None = None
    alpha: float = 0.01
    use_pe: bool = True
    cross_attention: str = "literal"
    seed: int = 0

    def __post_init__(self):
        if self.d_features < 1:
            raise ValueError(f"d_features must be >= 1, got {self.d_features}")
        if not self.n >= self.m >= 1:
            raise ValueError(f"need n >= m >= 1, got n={self.n}, m={self.m}")
        if self.num_layers < 1:
            raise ValueError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.kind not in ("full", "lam", "prob"):
            raise ValueError(f"unknown kind {self.kind!r}; expected full, lam or prob")
        if self.cross_attention not in ("literal", "conventional"):
            raise ValueError(
                f"cross_attention must be 'literal' or 'conventional', "
                f"got {self.cross_attention!r}"
            )
        if self.d_head is None:
            if self.d_model % self.heads != 0:
                raise ValueError(
                    f"d_model={self.d_model} not divisible by heads={self.heads}; "
                    "pass d_head explicitly"
                )
            object.__setattr__(self, "d_head", self.d_model // self.heads)
        if self.d_head < 1 or self.heads < 1 or self.d_model < 1:
            raise ValueError("d_model, heads and d_head must all be >= 1")
        if self.window is None:
            object.__setattr__(self, "window", default_window(self.n))
        if not 1 <= self.window <= self.n:
            raise ValueError(f"window must be in [1, {self.n}], got {self.window}")


class ForecastModel:
    """n x d_features -> m x d_features forecaster; parameters in a flat dict.

    Parameter names are dotted paths (``enc0.head1.wq``, ``time.w``) so
    the same names key the autodiff gradients, the optimizer state, and
    the checkpoint file.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.pe = (
            positional_encoding(config.n, config.d_model) if config.use_pe else None
        )
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(config.seed)
        self._weight(rng, "embed.w", (config.d_features, config.d_model))
        self._bias("embed.b", config.d_model)
        for i in range(config.num_layers):
            self._attention_params(rng, f"enc{i}")
            self._projection_params(rng, f"enc{i}")
        for i in range(config.num_layers):
            self._attention_params(rng, f"dec{i}.self")
            self._attention_params(rng, f"dec{i}.cross")
            self._projection_params(rng, f"dec{i}")
        self._weight(rng, "unembed.w", (config.d_model, config.d_features))
        self._bias("unembed.b", config.d_features)
        self._weight(rng, "time.w", (config.n, config.m))

    def _weight(self, rng, name: str, shape: tuple[int, int]) -> None:
        bound = 1.0 / math.sqrt(shape[0])
        self.params[name] = Tensor._wrap(rng.uniform(-bound, bound, size=shape))

    def _bias(self, name: str, width: int) -> None:
        self.params[name] = Tensor.zeros((width,))

    def _attention_params(self, rng, prefix: str) -> None:
        cfg = self.config
        for j in range(cfg.heads):
            self._weight(rng, f"{prefix}.head{j}.wq", (cfg.d_head, cfg.d_model))
            self._weight(rng, f"{prefix}.head{j}.wk", (cfg.d_head, cfg.d_model))
            self._weight(rng, f"{prefix}.head{j}.wv", (cfg.d_head, cfg.d_model))
        self._weight(rng, f"{prefix}.wo", (cfg.heads * cfg.d_head, cfg.d_model))

    def _projection_params(self, rng, prefix: str) -> None:
        d = self.config.d_model
        self._weight(rng, f"{prefix}.ff1.w", (d, d))
        self._bias(f"{prefix}.ff1.b", d)
        self._weight(rng, f"{prefix}.ff2.w", (d, d))
        self._bias(f"{prefix}.ff2.b", d)

    # -- forward ---------------------------------------------------------

    def _mh(self, ops, prefix: str, q, k, v, p, inner):
        head_ws = [
            (p(f"{prefix}.head{j}.wq"), p(f"{prefix}.head{j}.wk"), p(f"{prefix}.head{j}.wv"))
            for j in range(self.config.heads)
        ]
        return _multi_head(ops, q, k, v, head_ws, p(f"{prefix}.wo"), inner)

    def _projections(self, ops, prefix: str, x, p):
        a = self.config.alpha
        h = ops.affine(x, p(f"{prefix}.ff1.w"), p(f"{prefix}.ff1.b"), a)
        return ops.affine(h, p(f"{prefix}.ff2.w"), p(f"{prefix}.ff2.b"), a)

    def _encoder_layer(self, ops, i: int, x, p, inner):
        attended = self._mh(ops, f"enc{i}", x, x, x, p, inner)
        return self._projections(ops, f"enc{i}", ops.add(x, attended), p)

    def _decoder_layer(self, ops, i: int, y, enc, p, inner):
        self_att = self._mh(ops, f"dec{i}.self", y, y, y, p, inner)
        r1 = ops.add(y, self_att)
        if self.config.cross_attention == "literal":
            cross = self._mh(ops, f"dec{i}.cross", enc, enc, r1, p, inner)
        else:
            cross = self._mh(ops, f"dec{i}.cross", r1, enc, enc, p, inner)
        return self._projections(ops, f"dec{i}", ops.add(r1, cross), p)

    def _embed(self, ops, x, p):
        stream = ops.affine(x, p("embed.w"), p("embed.b"))
        if self.pe is not None:
            stream = ops.add(stream, ops.constant(self.pe))
        return stream

    def _encode(self, ops, stream, p, inner):
        enc = stream
        for i in range(self.config.num_layers):
            enc = self._encoder_layer(ops, i, enc, p, inner)
        return enc

    def _forward(self, ops, x, p, inner):
        stream = self._embed(ops, x, p)
        enc = self._encode(ops, stream, p, inner)
        dec = stream
        for i in range(self.config.num_layers):
            dec = self._decoder_layer(ops, i, dec, enc, p, inner)
        feat = ops.affine(dec, p("unembed.w"), p("unembed.b"))
        return ops.matmul_batched(ops.transpose_last2(p("time.w")), feat)

    def _check_input(self, x: Tensor) -> None:
        want = (self.config.n, self.config.d_features)
        if x.shape != want:
            raise DimensionError(f"input shape {x.shape} != {want}")

    def _inner(self):
        cfg = self.config
        return _resolve_inner(cfg.kind, cfg.window, cfg.seed)

    def forward(self, x: Tensor, inner=None) -> Tensor:
        """Eager forecast: n x d_features -> m x d_features.

        ``inner`` overrides the attention callable (ops, q, k, v) -> out;
        used to swap in reference kernels for interchangeability checks.
        """
        self._check_input(x)
        return self._forward(
            EAGER, x, lambda name: self.params[name], inner or self._inner()
        )

    def encode(self, x: Tensor) -> Tensor:
        """Embedding (+ position signal) and the encoder stack only."""
        self._check_input(x)
        p = lambda name: self.params[name]
        return self._encode(EAGER, self._embed(EAGER, x, p), p, self._inner())

    def forward_graph(self, g: Graph, x: Tensor) -> tuple[Node, dict[str, Node]]:
        """Recorded forward for training; returns output node and param nodes."""
        self._check_input(x)
        if self.config.kind == "prob":
            raise ValueError("kind 'prob' has no recorded mode (sampled, no gradient)")
        nodes = {name: g.parameter(t) for name, t in self.params.items()}
        out = self._forward(g, g.constant(x), lambda name: nodes[name], self._inner())
        return out, nodes


def count_parameters(model: ForecastModel) -> int:
    """Total scalar parameters registered on the model."""
    return sum(t.size for t in model.params.values())


def parameter_breakdown(model: ForecastModel) -> dict[str, int]:
    """Parameter totals grouped by top-level block (embed, enc0, ..., time)."""
    out: dict[str, int] = {}
    for name, t in model.params.items():
        block = name.split(".")[0]
        out[block] = out.get(block, 0) + t.size
    return out


# -- training -------------------------------------------------------------


class TrainDivergenceError(RuntimeError):
    """Training loss left the finite range; carries the last finite curve."""

    def __init__(self, message: str, history: dict[str, list[float]]):
        super().__init__(message)
        self.history = history


@dataclass
class TrainReport:
    """Per-epoch curves plus final held-out metrics."""

    epochs_run: int
    train_mse: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    train_mae: list[float] = field(default_factory=list)
    val_mae: list[float] = field(default_factory=list)
    test_mse: float | None = None
    test_mae: float | None = None
    stopped_early: bool = False
    best_epoch: int = -1
    wall_seconds: float = 0.0


def evaluate(model: ForecastModel, windows) -> tuple[float, float]:
    """Mean MSE / MAE of eager forecasts over (input, target) windows."""
    if not windows:
        return float("nan"), float("nan")
    se = ae = 0.0
    for x, y in windows:
        pred = model.forward(x)
        se += mse(pred, y)
        ae += mae(pred, y)
    return se / len(windows), ae / len(windows)


def _window_grads(model: ForecastModel, x: Tensor, y: Tensor):
    g = Graph()
    out, nodes = model.forward_graph(g, x)
    loss = g.mse(out, y)
    grads = g.backward(loss)
    pred = g.value(out)
    return (
        {name: grads[node.id].data for name, node in nodes.items()},
        loss.value.item(),
        float(np.mean(np.abs(pred.data - y.data))),
    )


def train(
    model: ForecastModel,
    dataset: WindowedDataset,
    epochs: int = 20,
    lr: float = 1e-3,
    batch: int = 32,
    patience: int = 3,
    log=None,
) -> TrainReport:
    """Adam on window MSE with validation-plateau early stopping.

    Shuffles train windows each epoch (seeded from the model config),
    averages gradients over each batch, and tracks the best validation
    epoch; those best parameters are restored before returning. Raises
    :class:`TrainDivergenceError` if any loss goes non-finite.
    """
    if not dataset.train:
        raise ValueError("dataset has no training windows")
    if epochs < 0 or batch < 1 or patience < 0:
        raise ValueError("need epochs >= 0, batch >= 1, patience >= 0")
    started = time.perf_counter()
    rng = np.random.default_rng(model.config.seed)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    moment1 = {k: np.zeros_like(t.data) for k, t in model.params.items()}
    moment2 = {k: np.zeros_like(t.data) for k, t in model.params.items()}
    steps = 0
    report = TrainReport(epochs_run=0)
    best_val = math.inf
    best_params = {k: t.data.copy() for k, t in model.params.items()}
    stale = 0

    for epoch in range(epochs):
        order = rng.permutation(len(dataset.train))
        # window-indexed so the epoch mean is independent of shuffle order
        epoch_se = np.zeros(len(order))
        epoch_ae = np.zeros(len(order))
        for at in range(0, len(order), batch):
            chunk = order[at : at + batch]
            accum = {k: np.zeros_like(t.data) for k, t in model.params.items()}
            for idx in chunk:
                x, y = dataset.train[idx]
                grads, window_mse, window_mae = _window_grads(model, x, y)
                if not math.isfinite(window_mse):
                    raise TrainDivergenceError(
                        f"non-finite loss at epoch {epoch}, window {int(idx)}",
                        {"train_mse": report.train_mse, "val_mse": report.val_mse},
                    )
                epoch_se[idx] = window_mse
                epoch_ae[idx] = window_mae
                for name in accum:
                    accum[name] += grads[name]
            steps += 1
            scale = 1.0 / len(chunk)
            correct1 = 1.0 - beta1**steps
            correct2 = 1.0 - beta2**steps
            for name, t in model.params.items():
                ghat = accum[name] * scale
                moment1[name] = beta1 * moment1[name] + (1 - beta1) * ghat
                moment2[name] = beta2 * moment2[name] + (1 - beta2) * ghat * ghat
                step = (
                    lr
                    * (moment1[name] / correct1)
                    / (np.sqrt(moment2[name] / correct2) + eps)
                )
                model.params[name] = Tensor._wrap(t.data - step)
        report.train_mse.append(float(epoch_se.mean()))
        report.train_mae.append(float(epoch_ae.mean()))
        val_mse, val_mae = evaluate(model, dataset.val)
        report.val_mse.append(val_mse)
        report.val_mae.append(val_mae)
        report.epochs_run = epoch + 1
        if log is not None:
            log(
                f"epoch {epoch}: train_mse={report.train_mse[-1]:.6f} "
                f"val_mse={val_mse:.6f}"
            )
        if not math.isfinite(val_mse):
            raise TrainDivergenceError(
                f"non-finite validation loss at epoch {epoch}",
                {"train_mse": report.train_mse, "val_mse": report.val_mse},
            )
        if val_mse < best_val:
            best_val = val_mse
            best_params = {k: t.data.copy() for k, t in model.params.items()}
            report.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= patience > 0:
                report.stopped_early = True
                break

    if report.best_epoch >= 0:
        for name, arr in best_params.items():
            model.params[name] = Tensor._wrap(arr)
    if dataset.test:
        report.test_mse, report.test_mae = evaluate(model, dataset.test)
    report.wall_seconds = time.perf_counter() - started
    return report


# -- checkpoints ----------------------------------------------------------


def save_checkpoint(
    model: ForecastModel,
    path: str,
    scaler: Scaler | None = None,
    feature_names=None,
) -> str:
    """Write parameters plus a JSON manifest (config, shapes, scaler).

    Arrays are stored uncompressed at full precision, so a load followed
    by a forward is bitwise identical to the pre-save forward. Returns
    the path actually written (a ``.npz`` suffix is added if missing,
    matching the storage format).
    """
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "param_names": list(model.params),
        "param_shapes": {k: list(t.shape) for k, t in model.params.items()},
    }
    if scaler is not None:
        manifest["scaler"] = {
            "mean": scaler.mean.tolist(),
            "std": scaler.std.tolist(),
        }
    if feature_names is not None:
        manifest["feature_names"] = list(feature_names)
    if not path.endswith(".npz"):
        path += ".npz"
    arrays = {name: t.data for name, t in model.params.items()}
    np.savez(path, __manifest__=np.array(json.dumps(manifest)), **arrays)
    return path


def load_checkpoint(path: str):
    """Rebuild (model, scaler, feature_names) from :func:`save_checkpoint`.

    Scaler and feature_names are None when the checkpoint carries none.
    Raises on version or shape mismatches.
    """
    with np.load(path, allow_pickle=False) as payload:
        manifest = json.loads(str(payload["__manifest__"][()]))
        if manifest["version"] != CHECKPOINT_VERSION:
            raise ValueError(
                f"checkpoint version {manifest['version']} != {CHECKPOINT_VERSION}"
            )
        model = ForecastModel(ModelConfig(**manifest["config"]))
        if manifest["param_names"] != list(model.params):
            raise ValueError("checkpoint parameter names do not match the config")
        for name in model.params:
            arr = payload[name]
            if arr.shape != model.params[name].shape:
                raise ValueError(
                    f"checkpoint shape {arr.shape} != expected "
                    f"{model.params[name].shape} for {name}"
                )
            model.params[name] = Tensor._wrap(arr)
    scaler = None
    if "scaler" in manifest:
        scaler = Scaler(
            mean=np.asarray(manifest["scaler"]["mean"], dtype=np.float64),
            std=np.asarray(manifest["scaler"]["std"], dtype=np.float64),
        )
    return model, scaler, manifest.get("feature_names")

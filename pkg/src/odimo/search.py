"""Differentiable channel-to-accelerator search, discretization and fine-tuning.

Every Conv/FC layer holds one fake-quantized copy of its weights per
accelerator; the copies are mixed per output channel by the temperature
softmax of trainable logits ``alpha`` (shape ``C_out x N``). The training loss
adds ``lam`` times a hardware cost computed from the expected number of
channels per accelerator.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .hardware import AcceleratorSpec, energy_from_latencies, expected_channels, layer_latency
from .mapping import MappingDecision
from .network import FloatExecutor, Network, Node, run
from .optim import SGD, Adam
from .quant import (
    QuantSpec,
    fake_quantize_activations,
    fake_quantize_weights,
    init_log_scale,
    truncate_activation,
)
from .tensor import Tensor, no_grad, where

log = logging.getLogger(__name__)

OBJECTIVES = ("latency", "energy")
METRICS = ("accuracy", "objective")


class SearchError(RuntimeError):
    pass


class DivergenceError(SearchError):
    """Raised when the training loss stops being finite."""


@dataclass
class TrainConfig:
    epochs: int = 20
    patience: int = 20
    batch_size: int = 64
    lr_w: float = 0.02
    lr_alpha: float = 0.05
    lr_q: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 0.0
    tau: float = 1.0
    tau_decay: float = 1.0
    metric: str = "accuracy"
    seed: int = 0

    def __post_init__(self):
        if self.metric not in METRICS:
            raise SearchError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.tau <= 0 or not 0 < self.tau_decay <= 1:
            raise SearchError("need tau > 0 and 0 < tau_decay <= 1")
        if self.epochs < 0 or self.patience < 1 or self.batch_size < 1:
            raise SearchError("epochs >= 0, patience >= 1 and batch_size >= 1 required")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


# -- trainable state ----------------------------------------------------------


class AlphaParams:
    """Per-layer logits ``alpha[name]`` of shape ``(C_out, N)``.

    Accelerators that cannot run a layer kind are masked with ``-inf`` before
    the softmax, so they get probability 0 and zero gradient.
    """

    def __init__(self, net: Network, accs, tau: float = 1.0, init: float = 0.0):
        self.tau = tau
        self.n = len(accs)
        self.alpha: dict[str, Tensor] = {}
        self.masks: dict[str, np.ndarray] = {}
        for node in net.mappable():
            spec = net.layer_spec(node.name)
            mask = np.array([a.supports(spec.kind) for a in accs])
            if not mask.any():
                raise SearchError(f"{node.name}: no accelerator supports {spec.kind} layers")
            self.masks[node.name] = mask
            self.alpha[node.name] = Tensor(np.full((spec.c_out, self.n), init, dtype=np.float64), requires_grad=True)

    def _bias(self, name: str) -> np.ndarray:
        return np.where(self.masks[name], 0.0, -np.inf)

    def masked(self, name: str) -> np.ndarray:
        return self.alpha[name].data + self._bias(name)

    def probs(self, name: str) -> Tensor:
        return ops.softmax_temp(self.alpha[name] + Tensor(self._bias(name)), self.tau)

    def params(self) -> list[Tensor]:
        return list(self.alpha.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"alpha/{k}": v.data.copy() for k, v in self.alpha.items()}

    def load_state_arrays(self, arrays: dict) -> None:
        for k, v in arrays.items():
            if k.startswith("alpha/"):
                self.alpha[k[6:]].data = np.array(v, dtype=np.float64)


class QuantState:
    """Log-domain weight scales per (layer, accelerator) and activation ranges per site."""

    def __init__(self, w_scales: dict[str, list[Tensor]], a_ranges: dict[str, Tensor]):
        self.w_scales = w_scales
        self.a_ranges = a_ranges

    @classmethod
    def init(cls, net: Network, accs, x_calib: np.ndarray | None = None) -> "QuantState":
        w_scales = {}
        for node in net.mappable():
            w = net.params[f"{node.name}.weight"].data
            w_scales[node.name] = [
                Tensor(np.float64(init_log_scale(w, a.weight_bits)), requires_grad=True) for a in accs
            ]
        ranges = calibrate_ranges(net, x_calib) if x_calib is not None else {}
        a_ranges = {s: Tensor(np.float64(ranges.get(s, 0.0)), requires_grad=True) for s in net.quant_sites()}
        return cls(w_scales, a_ranges)

    def spec(self, layer: str, i: int, acc: AcceleratorSpec) -> QuantSpec:
        return QuantSpec(acc.weight_bits, self.w_scales[layer][i])

    def params(self) -> list[Tensor]:
        out = [t for k in sorted(self.w_scales) for t in self.w_scales[k]]
        return out + [self.a_ranges[k] for k in sorted(self.a_ranges)]

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, ts in self.w_scales.items():
            out[f"wscale/{k}"] = np.array([float(t.data) for t in ts])
        for k, t in self.a_ranges.items():
            out[f"arange/{k}"] = np.array([float(t.data)])
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        for k, v in arrays.items():
            kind, _, name = k.partition("/")
            if kind == "wscale":
                for t, val in zip(self.w_scales[name], v):
                    t.data = np.float64(val)
            elif kind == "arange":
                self.a_ranges[name].data = np.float64(v[0])

    @classmethod
    def from_arrays(cls, arrays: dict) -> "QuantState":
        q = cls({}, {})
        for k, v in arrays.items():
            kind, _, name = k.partition("/")
            if kind == "wscale":
                q.w_scales[name] = [Tensor(np.float64(x), requires_grad=True) for x in v]
            elif kind == "arange":
                q.a_ranges[name] = Tensor(np.float64(v[0]), requires_grad=True)
        return q

    def copy(self) -> "QuantState":
        return QuantState.from_arrays(self.state_arrays())


def calibrate_ranges(net: Network, x: np.ndarray, quantile: float = 99.9) -> dict[str, float]:
    """Initial log activation ranges from a float forward pass (high percentile per site)."""
    sites = set(net.quant_sites())
    seen: dict[str, float] = {}

    class _Probe(FloatExecutor):
        def act(self, node, y):
            if node.name in sites:
                v = float(np.percentile(y.data, quantile))
                seen[node.name] = max(v, 1e-3)
            return y

    with no_grad():
        run(net, Tensor(x), _Probe(net))
    return {k: math.log(v) for k, v in seen.items()}


# -- effective weights and executors --------------------------------------------


def effective_weights(copies, alpha_bar: Tensor) -> Tensor:
    """Per output channel ``W_c = sum_i alpha_bar[c, i] * W_i[c]``.

    ``copies`` holds one tensor per accelerator; ``None`` marks a masked
    accelerator whose column of ``alpha_bar`` must be zero and is skipped.
    """
    present = [(i, w) for i, w in enumerate(copies) if w is not None]
    if not present:
        raise SearchError("effective_weights needs at least one weight copy")
    shape = present[0][1].shape
    for _, w in present:
        if w.shape != shape:
            raise SearchError(f"weight copies disagree in shape: {w.shape} vs {shape}")
    if alpha_bar.shape != (shape[0], len(copies)):
        raise SearchError(f"alpha_bar shape {alpha_bar.shape} does not match ({shape[0]}, {len(copies)})")
    bshape = (shape[0],) + (1,) * (len(shape) - 1)
    out = None
    for i, w in present:
        coef = alpha_bar[:, i].reshape(bshape)
        if coef.dtype != w.dtype:
            coef = coef.astype(w.dtype)
        term = coef * w
        out = term if out is None else out + term
    return out


class SearchExecutor(FloatExecutor):
    """Forward pass with alpha-mixed fake-quantized weights.

    Activations are fake-quantized at every site to the narrowest activation
    width among the accelerators (unless ``quantize_acts`` is False).
    """

    def __init__(self, net: Network, accs, alpha: AlphaParams, quant: QuantState, quantize_acts: bool = True):
        super().__init__(net)
        self.accs = list(accs)
        self.alpha = alpha
        self.quant = quant
        self.act_bits = min(a.activation_bits for a in self.accs)
        self.quantize_acts = quantize_acts

    def weight(self, node: Node) -> Tensor:
        w = self.net.params[f"{node.name}.weight"]
        mask = self.alpha.masks[node.name]
        copies = [
            fake_quantize_weights(w, self.quant.spec(node.name, i, acc)) if mask[i] else None
            for i, acc in enumerate(self.accs)
        ]
        return effective_weights(copies, self.alpha.probs(node.name))

    def act(self, node: Node, y: Tensor) -> Tensor:
        if not self.quantize_acts:
            return y
        return fake_quantize_activations(y, self.act_bits, self.quant.a_ranges[node.name])


class MappedExecutor(FloatExecutor):
    """Forward pass of a fixed mapping (fine-tuning and simulation).

    Weights of channel ``c`` are quantized with the grid of its accelerator.
    Activations are stored at the widest activation width ``S``; channels on an
    accelerator with ``b < S`` activation bits read inputs with ``S - b`` LSBs
    dropped, and when a layer feeds a ReLU site directly, their outputs are
    truncated the same way after quantization.
    """

    def __init__(self, net: Network, accs, decision: MappingDecision, quant: QuantState, quantize_acts: bool = True):
        super().__init__(net)
        self.accs = list(accs)
        self.decision = decision
        self.quant = quant
        self.quantize_acts = quantize_acts
        self.store_bits = max(a.activation_bits for a in self.accs)
        self.drops = {
            name: np.array([self.store_bits - self.accs[i].activation_bits for i in a])
            for name, a in decision.assignments.items()
        }
        self._onehot = {
            name: Tensor(np.eye(len(self.accs), dtype=net.params[f"{name}.weight"].dtype)[a])
            for name, a in decision.assignments.items()
        }

    def weight(self, node: Node) -> Tensor:
        a = self.decision.assignments[node.name]
        w = self.net.params[f"{node.name}.weight"]
        used = set(np.unique(a).tolist())
        copies = [
            fake_quantize_weights(w, self.quant.spec(node.name, i, acc)) if i in used else None
            for i, acc in enumerate(self.accs)
        ]
        return effective_weights(copies, self._onehot[node.name])

    def layer(self, node: Node, x: Tensor) -> Tensor:
        w, b = self.weight(node), self.bias(node)
        drops = self.drops[node.name]
        levels = np.unique(drops)
        if not self.quantize_acts or len(levels) == 1 and levels[0] == 0:
            return self.apply_layer(node, x, w, b)
        site = self.net.input_site(node.name)
        rng = self.quant.a_ranges[site]
        out = None
        bshape = (-1,) + (1,) * (w.ndim - 1)
        for d in levels:
            xin = truncate_activation(x, self.store_bits, rng, int(d))
            part = self.apply_layer(node, xin, w * Tensor((drops == d).astype(w.dtype).reshape(bshape)), None)
            out = part if out is None else out + part
        return out if b is None else out + b.reshape((1, -1) + (1,) * (out.ndim - 2))

    def act(self, node: Node, y: Tensor) -> Tensor:
        if not self.quantize_acts:
            return y
        rng = self.quant.a_ranges[node.name]
        q = fake_quantize_activations(y, self.store_bits, rng)
        producer = self.net.site_producer(node.name)
        if producer is None:
            return q
        drops = self.drops[producer]
        for d in np.unique(drops):
            if d == 0:
                continue
            sel = (drops == d).reshape((1, -1) + (1,) * (q.ndim - 2))
            q = where(np.broadcast_to(sel, q.shape), truncate_activation(q, self.store_bits, rng, int(d)), q)
        return q


# -- loss -----------------------------------------------------------------------


@dataclass
class SearchState:
    net: Network
    accs: list
    alpha: AlphaParams
    quant: QuantState
    lam: float = 0.0
    objective: str = "latency"
    betas: dict = field(default_factory=dict)
    epoch: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.lam < 0:
            raise SearchError(f"lambda must be >= 0, got {self.lam}")
        if self.objective not in OBJECTIVES:
            raise SearchError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if not self.betas:
            self.betas = initial_betas(self.net, self.accs, self.alpha)

    def executor(self, quantize_acts: bool = True) -> SearchExecutor:
        return SearchExecutor(self.net, self.accs, self.alpha, self.quant, quantize_acts)


def new_state(net: Network, accs, lam: float = 0.0, objective: str = "latency", tau: float = 1.0,
              x_calib: np.ndarray | None = None) -> SearchState:
    """Fresh search state on a BN-free network: uniform alpha, calibrated quantizers."""
    net.check_quantizable()
    return SearchState(net, list(accs), AlphaParams(net, accs, tau), QuantState.init(net, accs, x_calib), lam, objective)


def initial_betas(net: Network, accs, alpha: AlphaParams, fraction: float = 0.01) -> dict[str, float]:
    """Smooth-max temperature per layer: a fraction of the mean per-accelerator latency."""
    out = {}
    with no_grad():
        for name, spec in net.layer_specs().items():
            counts = expected_channels(alpha.probs(name)).data
            lats = [float(a.latency(spec, float(c))) for a, c in zip(accs, counts)]
            out[name] = max(fraction * float(np.mean(lats)), 1e-6)
    return out


def cost_regularizer(state: SearchState) -> Tensor:
    """Sum over layers of smooth layer latency or energy at the expected channel counts."""
    total = None
    for name, spec in state.net.layer_specs().items():
        counts = expected_channels(state.alpha.probs(name))
        cs = [counts[i] for i in range(len(state.accs))]
        m, lats = layer_latency(spec, cs, state.accs, "smooth", state.betas[name])
        term = m if state.objective == "latency" else energy_from_latencies(m, lats, state.accs)
        total = term if total is None else total + term
    return total


def total_loss(state: SearchState, x, y, quantize_acts: bool = True):
    """Task cross-entropy plus ``lam`` times the cost regularizer.

    Returns ``(loss, task_loss, reg)``; ``reg`` is None when ``lam == 0``.
    """
    logits = run(state.net, x if isinstance(x, Tensor) else Tensor(x), state.executor(quantize_acts))
    task = ops.cross_entropy(logits, y)
    if state.lam == 0:
        return task, task, None
    reg = cost_regularizer(state)
    return task + (reg * state.lam).astype(task.dtype), task, reg


# -- generic training loop --------------------------------------------------------


def evaluate(net: Network, executor, x: np.ndarray, y: np.ndarray, batch: int = 500) -> dict:
    """Top-1 accuracy (%) and mean cross-entropy."""
    correct, loss_sum = 0, 0.0
    with no_grad():
        for s in range(0, len(y), batch):
            logits = run(net, Tensor(x[s:s + batch]), executor)
            yb = y[s:s + batch]
            correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
            loss_sum += ops.cross_entropy(logits, yb).item() * len(yb)
    n = max(len(y), 1)
    return {"accuracy": 100.0 * correct / n, "loss": loss_sum / n}


def _param_snapshot(tensors: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: t.data.copy() for k, t in tensors.items()}


def _param_restore(tensors: dict[str, Tensor], snap: dict[str, np.ndarray]) -> None:
    for k, v in snap.items():
        tensors[k].data = v.copy()


def _train(step_loss, evaluate_fn, optimizers, snapshot, restore, data, cfg: TrainConfig, epoch_hook=None) -> list[dict]:
    """Mini-batch loop with best-checkpoint early stopping.

    ``evaluate_fn`` returns a dict with ``accuracy`` and ``objective``; the
    best epoch by ``cfg.metric`` is restored at the end.
    """
    rng = np.random.default_rng(cfg.seed)
    n = len(data.y_train)
    history, best, best_score, bad = [], None, -math.inf, 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            for opt in optimizers:
                opt.zero_grad()
            loss, parts = step_loss(data.x_train[idx], data.y_train[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(
                    f"non-finite loss {value} at epoch {epoch}, batch {s // cfg.batch_size} ({parts}); "
                    "try a lower learning rate or lambda"
                )
            loss.backward()
            for opt in optimizers:
                opt.step()
            losses.append(value)
        if epoch_hook is not None:
            epoch_hook(epoch)
        val = evaluate_fn()
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan"), **val}
        history.append(row)
        score = val["accuracy"] if cfg.metric == "accuracy" else -val["objective"]
        log.debug("epoch %d %s", epoch, row)
        if score > best_score:
            best, best_score, bad = snapshot(), score, 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    if best is not None:
        restore(best)
    return history


def _quant_tensors(quant: QuantState) -> dict[str, Tensor]:
    out = {f"w/{k}/{i}": t for k, ts in quant.w_scales.items() for i, t in enumerate(ts)}
    out.update({f"a/{k}": t for k, t in quant.a_ranges.items()})
    return out


# -- public workflows -------------------------------------------------------------


def pretrain(net: Network, data, cfg: TrainConfig) -> list[dict]:
    """Float training (BN in training mode); restores the best-validation weights in place."""

    def step(xb, yb):
        logits = run(net, Tensor(xb), FloatExecutor(net, training=True))
        loss = ops.cross_entropy(logits, yb)
        return loss, {"task": loss.item()}

    def val():
        r = evaluate(net, FloatExecutor(net), data.x_val, data.y_val)
        return {**r, "objective": r["loss"]}

    def snap():
        return (_param_snapshot(net.params), {k: v.copy() for k, v in net.buffers.items()})

    def restore(s):
        _param_restore(net.params, s[0])
        for k, v in s[1].items():
            net.buffers[k][...] = v

    opt = SGD(net.trainable(), lr=cfg.lr_w, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    return _train(step, val, [opt], snap, restore, data, cfg)


def search(state: SearchState, data, cfg: TrainConfig) -> SearchState:
    """Joint optimization of weights, alpha and quantizer scales on the regularized loss.

    Weights use SGD with momentum; alpha and the log scales use Adam. Both take
    one step per batch. The best validation epoch (by ``cfg.metric``; the
    objective is validation cross-entropy plus ``lam`` times the cost) is kept.
    """
    state.alpha.tau = cfg.tau
    net, alpha, quant = state.net, state.alpha, state.quant
    opts = [
        SGD(net.trainable(), lr=cfg.lr_w, momentum=cfg.momentum, weight_decay=cfg.weight_decay),
        Adam(alpha.params(), lr=cfg.lr_alpha),
        Adam(quant.params(), lr=cfg.lr_q),
    ]

    def step(xb, yb):
        loss, task, reg = total_loss(state, xb, yb)
        return loss, {"task": task.item(), "reg": None if reg is None else reg.item()}

    def val():
        r = evaluate(net, state.executor(), data.x_val, data.y_val)
        with no_grad():
            reg = cost_regularizer(state).item() if state.lam else 0.0
        return {**r, "reg": reg, "objective": r["loss"] + state.lam * reg, "tau": alpha.tau}

    def snap():
        return (_param_snapshot(net.params), alpha.state_arrays(), quant.state_arrays(), alpha.tau)

    def restore(s):
        _param_restore(net.params, s[0])
        alpha.load_state_arrays(s[1])
        quant.load_state_arrays(s[2])
        alpha.tau = s[3]

    def anneal(epoch):
        state.epoch = epoch + 1
        alpha.tau *= cfg.tau_decay

    state.history = _train(step, val, opts, snap, restore, data, cfg, anneal)
    return state


def discretize(state: SearchState) -> MappingDecision:
    """Per channel, the supported accelerator with the largest logit.

    Ties go to the lowest accelerator index (``np.argmax`` returns the first
    maximum); masked accelerators are never chosen.
    """
    out = {name: np.argmax(state.alpha.masked(name), axis=1) for name in state.alpha.alpha}
    return MappingDecision(out, [a.name for a in state.accs])


def finetune(net: Network, quant: QuantState, decision: MappingDecision, accs, data, cfg: TrainConfig) -> list[dict]:
    """Quantization-aware training of a fixed mapping on the task loss only.

    Updates ``net`` and ``quant`` in place and restores the best validation epoch.
    """
    decision.validate(net, accs)
    executor = MappedExecutor(net, accs, decision, quant)

    def step(xb, yb):
        loss = ops.cross_entropy(run(net, Tensor(xb), executor), yb)
        return loss, {"task": loss.item()}

    def val():
        r = evaluate(net, executor, data.x_val, data.y_val)
        return {**r, "objective": r["loss"]}

    qt = _quant_tensors(quant)

    def snap():
        return (_param_snapshot(net.params), _param_snapshot(qt))

    def restore(s):
        _param_restore(net.params, s[0])
        _param_restore(qt, s[1])

    opts = [
        SGD(net.trainable(), lr=cfg.lr_w, momentum=cfg.momentum, weight_decay=cfg.weight_decay),
        Adam(quant.params(), lr=cfg.lr_q),
    ]
    return _train(step, val, opts, snap, restore, data, cfg)

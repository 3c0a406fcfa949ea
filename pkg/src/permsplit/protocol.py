"""Round-driven server and client state machines for four strategies:

  pfesta  cached permuted feature upload once, per-round body-output /
          tail-gradient exchange, tail unification every n rounds
  festa   per-round feature + gradient exchange with CNN heads, head and
          tail unification every n rounds
  sl      sequential split learning, per-client immediate body updates,
          no parameter traffic
  fl      local full-model training, full-model averaging every n rounds

All cross-party values flow through transport messages over metered links;
"parallel" client loops execute in deterministic client-id order with
barrier semantics, which is observationally equivalent for the averaged
updates and keeps runs bit-reproducible. Aggregates computed at round
i in UnifyingRounds are distributed at the start of round i+1 (plus an
initial broadcast at round 1), so for n | R each client exchanges exactly
2R/n parameter payloads.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import costs, model, perm, tasks
from .engine import (Tensor, backward, bce_with_logits, mul, no_grad,
                     pow_const, sigmoid, tmean, tsum)
from .model import ConfigError, ModelConfig
from .transport import Message, MessageKind, TrafficLedger, channel_pair

__all__ = [
    "Strategy", "Ablations", "RunConfig", "WorldConfig", "ProtocolViolation",
    "RunReport", "run", "build_initial", "InitialParams", "task_loss",
    "SgdOptimizer", "AdamOptimizer", "EpochSampler", "unify_arrays",
    "cost_params_for", "write_report", "DEFAULT_GRAD_SCALES",
]

DEFAULT_GRAD_SCALES = {"classification": 1.0, "severity": 2.0,
                       "segmentation": 10.0}


class ProtocolViolation(RuntimeError):
    """A state-machine precondition was broken (missing cache entry,
    heterogeneous tails within a task, ...)."""


class Strategy(str, Enum):
    PFESTA = "pfesta"
    FESTA = "festa"
    FL = "fl"
    SL = "sl"


@dataclass(frozen=True)
class Ablations:
    learnable_head: bool = False
    no_permutation: bool = False
    no_pos_embedding: bool = False


@dataclass(frozen=True)
class RunConfig:
    strategy: Strategy = Strategy.PFESTA
    rounds: int = 200
    unify_interval: int = 20
    batch_size: int = 4
    eta: float = 0.05
    warmup_steps: int = 20
    grad_scales: dict = field(default_factory=lambda: dict(DEFAULT_GRAD_SCALES))
    seed: int = 1
    ablations: Ablations = Ablations()
    optimizer: str = "sgd"
    eval_interval: int = 0          # 0: evaluate at round 0 and R only
    retain_grad_trace: bool = False

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.rounds < 0:
            raise ConfigError(f"rounds must be >= 0, got {self.rounds}")
        if self.unify_interval < 1:
            raise ConfigError(f"unify_interval must be >= 1, got {self.unify_interval}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if any(v <= 0 for v in self.grad_scales.values()):
            raise ConfigError("grad_scales must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class WorldConfig:
    sizes: dict[str, list[int]]
    skew: float = 0.0
    test_sizes: dict[str, int] | None = None
    image_h: int = 32
    image_w: int = 32

    def build(self, seed: int) -> tasks.SyntheticWorld:
        return tasks.generate_world(seed, self.sizes, self.skew,
                                    self.test_sizes, self.image_h, self.image_w)


# ---------------------------------------------------------------------------
# losses


def _to_tensor_labels(labels: np.ndarray, like: Tensor) -> Tensor:
    return Tensor(np.asarray(labels, dtype=like.dtype))


def task_loss(kind: str, logits: Tensor, labels: np.ndarray) -> Tensor:
    """Classification/severity: mean per-output BCE on sigmoid logits.
    Segmentation: BCE + soft Dice + focal (gamma=2), equal weights."""
    y = _to_tensor_labels(labels, logits)
    if kind in ("classification", "severity"):
        return tmean(bce_with_logits(logits, y))
    if kind != "segmentation":
        raise ConfigError(f"unknown task kind {kind!r}")
    eps = 1e-5
    bce_el = bce_with_logits(logits, y)
    p = sigmoid(logits)
    inter = tsum(mul(p, y))
    dice_loss = 1.0 - (2.0 * inter + eps) / (tsum(p) + tsum(y) + eps)
    pt = mul(p, y) + mul(1.0 - p, 1.0 - y)
    focal = tmean(mul(pow_const(1.0 - pt, 2.0), bce_el))
    return tmean(bce_el) + dice_loss + focal


# ---------------------------------------------------------------------------
# optimizers and samplers


class SgdOptimizer:
    """Plain SGD with a linear warmup ramp to eta, then constant."""

    def __init__(self, params: list[Tensor], eta: float, warmup_steps: int = 0):
        self.params = {p.name: p for p in params}
        self.eta = eta
        self.warmup = warmup_steps
        self.t = 0

    def lr(self) -> float:
        if self.warmup and self.t < self.warmup:
            return self.eta * (self.t + 1) / self.warmup
        return self.eta

    def step(self, grads: dict[str, np.ndarray]) -> None:
        lr = self.lr()
        self.t += 1
        for name, g in grads.items():
            p = self.params.get(name)
            if p is not None and p.trainable:
                p.data = (p.data - lr * g).astype(p.data.dtype)


class AdamOptimizer:
    """Adam with bias correction; available behind the optimizer flag."""

    def __init__(self, params: list[Tensor], eta: float, warmup_steps: int = 0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = {p.name: p for p in params}
        self.eta, self.warmup = eta, warmup_steps
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def lr(self) -> float:
        if self.warmup and self.t < self.warmup:
            return self.eta * (self.t + 1) / self.warmup
        return self.eta

    def step(self, grads: dict[str, np.ndarray]) -> None:
        lr = self.lr()
        self.t += 1
        for name, g in grads.items():
            p = self.params.get(name)
            if p is None or not p.trainable:
                continue
            g64 = g.astype(np.float64)
            m = self._m.get(name, np.zeros_like(g64))
            v = self._v.get(name, np.zeros_like(g64))
            m = self.beta1 * m + (1 - self.beta1) * g64
            v = self.beta2 * v + (1 - self.beta2) * g64 * g64
            self._m[name], self._v[name] = m, v
            mh = m / (1 - self.beta1 ** self.t)
            vh = v / (1 - self.beta2 ** self.t)
            p.data = (p.data - lr * mh / (np.sqrt(vh) + self.eps)).astype(p.data.dtype)


def make_optimizer(cfg: RunConfig, params: list[Tensor]):
    cls = SgdOptimizer if cfg.optimizer == "sgd" else AdamOptimizer
    return cls(params, cfg.eta, cfg.warmup_steps)


class EpochSampler:
    """Without-replacement batches, reshuffled each epoch from a per-client
    seeded stream; batches may straddle epoch boundaries so every batch has
    exactly B ids."""

    def __init__(self, n_samples: int, seed: int, client_id: int):
        self.n = n_samples
        self.rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([seed, client_id, 11])))
        self._order: list[int] = []

    def next(self, b: int) -> list[int]:
        ids: list[int] = []
        while len(ids) < b:
            if not self._order:
                self._order = [int(i) for i in self.rng.permutation(self.n)]
            take = min(b - len(ids), len(self._order))
            ids.extend(self._order[:take])
            del self._order[:take]
        return ids


# ---------------------------------------------------------------------------
# initial parameters


@dataclass
class InitialParams:
    head: model.HeadParams
    body: model.BodyParams
    tails: dict[str, model.ParamBundle]
    cnn_heads: dict[str, model.CnnHeadParams]


def build_initial(cfg: RunConfig, world: tasks.SyntheticWorld,
                  mc: ModelConfig) -> InitialParams:
    """Seeded initial parameter sets; exposed so oracles can replicate them."""
    head_frozen = not cfg.ablations.learnable_head
    if cfg.strategy in (Strategy.SL, Strategy.FL):
        head_frozen = False
    head = model.init_head(mc, cfg.seed, frozen=head_frozen)
    body = model.init_body(mc, cfg.seed)
    tails = {}
    cnn_heads = {}
    for kind in world.tasks:
        stream = tasks.TASK_KINDS.index(kind)
        tails[kind] = model.init_tail(kind, mc, cfg.seed, stream=stream)
        if cfg.strategy == Strategy.FESTA:
            cnn_heads[kind] = model.init_cnn_head(mc, cfg.seed, stream=stream)
    return InitialParams(head, body, tails, cnn_heads)


def unify_arrays(array_lists: list[list[np.ndarray]]) -> list[np.ndarray]:
    """Elementwise mean of same-shaped parameter lists."""
    if not array_lists:
        raise ProtocolViolation("nothing to unify")
    ref = array_lists[0]
    for other in array_lists[1:]:
        if len(other) != len(ref) or any(a.shape != b.shape
                                         for a, b in zip(other, ref)):
            raise ProtocolViolation("heterogeneous tail shapes within one task")
    return [np.mean(np.stack([al[i] for al in array_lists]), axis=0,
                    dtype=np.float64).astype(ref[i].dtype)
            for i in range(len(ref))]


# ---------------------------------------------------------------------------
# report


@dataclass
class RunReport:
    config: dict
    rows: list[tuple] = field(default_factory=list)       # round, client, task, metric, value
    final_task_metrics: dict = field(default_factory=dict)
    ledger: TrafficLedger = field(default_factory=TrafficLedger)
    kinds_seen: set = field(default_factory=set)
    head_intact: bool | None = None
    cache_intact: bool | None = None
    final_params: dict = field(default_factory=dict)
    grad_trace: list = field(default_factory=list)
    trained_rounds: int = 0

    def metric_series(self, task: str, metric: str, client: str = "unified"):
        return [(r[0], r[4]) for r in self.rows
                if r[1] == client and r[2] == task and r[3] == metric]


def _config_echo(cfg: RunConfig, mc: ModelConfig,
                 world: tasks.SyntheticWorld) -> dict:
    echo = {
        "strategy": cfg.strategy.value,
        "rounds": cfg.rounds,
        "unify_interval": cfg.unify_interval,
        "batch_size": cfg.batch_size,
        "eta": cfg.eta,
        "warmup_steps": cfg.warmup_steps,
        "optimizer": cfg.optimizer,
        "seed": cfg.seed,
        "eval_interval": cfg.eval_interval,
        "ablate_learnable_head": cfg.ablations.learnable_head,
        "ablate_no_permutation": cfg.ablations.no_permutation,
        "ablate_no_pos_embedding": cfg.ablations.no_pos_embedding,
        "image_size": mc.image_h,
        "patch_size": mc.patch,
        "embed_dim": mc.d,
        "encoder_layers": mc.layers,
        "attention_heads": mc.heads,
        "tasks": ",".join(world.tasks),
    }
    for kind, td in world.tasks.items():
        echo[f"clients_{kind}"] = ",".join(str(c.n_samples) for c in td.clients)
        echo[f"grad_scale_{kind}"] = cfg.grad_scales.get(kind, 1.0)
    return echo


# ---------------------------------------------------------------------------
# evaluation


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def _forward_numpy(images: np.ndarray, head_fn, body: model.BodyParams,
                   tail: model.ParamBundle, chunk: int = 32) -> np.ndarray:
    outs = []
    with no_grad():
        for i in range(0, images.shape[0], chunk):
            x = Tensor(images[i:i + chunk])
            feats = head_fn(x)
            encoded = model.body_forward(feats, body)
            outs.append(model.tail_forward(encoded, tail).data)
    return np.concatenate(outs, axis=0)


def _metrics_for(kind: str, outputs: np.ndarray,
                 labels: np.ndarray) -> dict[str, float]:
    if kind == "classification":
        return {"auc": tasks.multiclass_auc(_np_sigmoid(outputs), labels)}
    if kind == "severity":
        return {"mse": tasks.mse(_np_sigmoid(outputs).sum(axis=1),
                                 labels.sum(axis=1))}
    probs = _np_sigmoid(outputs)
    scores = [tasks.dice(probs[i], labels[i]) for i in range(probs.shape[0])]
    return {"dice": float(np.mean(scores))}


# ---------------------------------------------------------------------------
# runtime


class _Client:
    def __init__(self, cd: tasks.ClientData, kind: str, link):
        self.cd = cd
        self.kind = kind
        self.cid = cd.client_id
        self.link = link
        self.tail: model.ParamBundle | None = None
        self.tail_opt = None
        self.head = None                 # embedder or CNN head, if owned
        self.head_opt = None
        self.body: model.BodyParams | None = None   # FL only
        self.full_opt = None
        self.keys: dict[int, perm.PermutationKey] = {}
        self.sampler: EpochSampler | None = None


class _Runtime:
    def __init__(self, cfg: RunConfig, world: tasks.SyntheticWorld,
                 mc: ModelConfig, initial: InitialParams, channel_factory):
        self.cfg = cfg
        self.world = world
        self.mc = mc
        self.ledger = TrafficLedger()
        self.kinds = [k for k in tasks.TASK_KINDS if k in world.tasks]
        if not self.kinds:
            raise ConfigError("world has no tasks")
        for kind in self.kinds:
            if kind not in cfg.grad_scales:
                raise ConfigError(f"grad_scales missing task {kind!r}")
        factory = channel_factory or (lambda cid: channel_pair(cid, self.ledger))

        self.head = initial.head.clone()
        self.head.frozen = initial.head.frozen
        self.head.set_trainable(not initial.head.frozen)
        self.body = initial.body.clone()
        self.tail_registry = {k: initial.tails[k].clone().arrays()
                              for k in self.kinds}
        self.head_registry = {k: initial.cnn_heads[k].clone().arrays()
                              for k in initial.cnn_heads}
        self.fl_registry = None
        self.cache: dict[tuple[int, int], np.ndarray] = {}
        self.server_ends: dict[int, object] = {}
        self.clients: list[_Client] = []
        self.body_opt = make_optimizer(cfg, self.body.tensors())
        self.initial = initial

        for kind in self.kinds:
            for cd in world.tasks[kind].clients:
                client_end, server_end = factory(cd.client_id)
                c = _Client(cd, kind, client_end)
                self.server_ends[cd.client_id] = server_end
                self.clients.append(c)
        self.clients.sort(key=lambda c: c.cid)

    # -- helpers ----------------------------------------------------------

    def clients_of(self, kind: str) -> list[_Client]:
        return [c for c in self.clients if c.kind == kind]

    def task_id(self, kind: str) -> int:
        return tasks.TASK_KINDS.index(kind)

    def unify_rounds(self, i: int) -> bool:
        return i % self.cfg.unify_interval == 0

    def needs_broadcast(self, i: int) -> bool:
        return i == 1 or self.unify_rounds(i - 1)

    def scale(self, kind: str) -> float:
        return float(self.cfg.grad_scales[kind])

    def labels_for(self, c: _Client, ids) -> np.ndarray:
        return c.cd.labels[np.asarray(ids, dtype=np.int64)]

    def embed_fn(self, head):
        include_pos = not self.cfg.ablations.no_pos_embedding
        return lambda x: model.embed_patches(x, head, include_pos=include_pos)

    # -- client-side tail step (shared by pfesta / festa / sl) -------------

    def client_tail_step(self, c: _Client, m: Message,
                         permuted: bool) -> tuple[Message, float]:
        """Inverse-permute the body output, run the tail, backprop the scaled
        task loss, update the local tail, and return the gradient message in
        server (permuted) order."""
        b = Tensor(m.payload[0], requires_grad=True)
        if permuted:
            inv = np.stack([c.keys[sid].inverse for sid in m.sample_ids])
            feats = perm.inverse_permute_batch(b, inv)
        else:
            feats = b
        logits = model.tail_forward(feats, c.tail)
        loss = mul(task_loss(c.kind, logits, self.labels_for(c, m.sample_ids)),
                   Tensor(np.asarray(self.scale(c.kind), dtype=logits.dtype)))
        grads = backward(loss)
        c.tail_opt.step(grads)
        reply = Message(MessageKind.TAIL_GRADIENT, m.round, c.cid,
                        m.task_id, m.sample_ids, (b.grad,))
        return reply, loss.item() / self.scale(c.kind)

    # -- parameter messaging ------------------------------------------------

    def broadcast_tail(self, c: _Client, i: int) -> None:
        msg = Message(MessageKind.TAIL_WEIGHTS_BROADCAST, i, c.cid,
                      self.task_id(c.kind),
                      payload=tuple(self.tail_registry[c.kind]))
        self.server_ends[c.cid].send(msg)
        c.tail.set_arrays(c.link.recv().payload)

    def upload_tail(self, c: _Client, i: int) -> list[np.ndarray]:
        c.link.send(Message(MessageKind.TAIL_WEIGHTS_UPLOAD, i, c.cid,
                            self.task_id(c.kind),
                            payload=tuple(c.tail.arrays())))
        return list(self.server_ends[c.cid].recv().payload)


def run(config: RunConfig, world: tasks.SyntheticWorld,
        model_cfg: ModelConfig | None = None,
        initial: InitialParams | None = None,
        channel_factory=None) -> RunReport:
    """Execute the selected strategy for R rounds and return the metrics time
    series plus the traffic ledger."""
    mc = model_cfg or ModelConfig()
    for td in world.tasks.values():
        if (td.spec.image_h, td.spec.image_w) != (mc.image_h, mc.image_w):
            raise ConfigError("world image size does not match model config")
    if initial is None:
        initial = build_initial(config, world, mc)
    rt = _Runtime(config, world, mc, initial, channel_factory)
    report = RunReport(config=_config_echo(config, mc, world))
    driver = {Strategy.PFESTA: _run_pfesta, Strategy.FESTA: _run_festa,
              Strategy.SL: _run_sl, Strategy.FL: _run_fl}[config.strategy]
    driver(rt, report)
    report.ledger = rt.ledger
    report.kinds_seen = set(rt.ledger.kinds_seen)
    report.trained_rounds = config.rounds
    _final_snapshot(rt, report)
    return report


def _final_snapshot(rt: _Runtime, report: RunReport) -> None:
    report.final_params = {
        "head": rt.head.snapshot(),
        "body": rt.body.snapshot(),
        "tails": {k: dict(zip([f"t{i}" for i in range(len(arrs))],
                              [a.copy() for a in arrs]))
                  for k, arrs in rt.tail_registry.items()},
    }


def _should_eval(cfg: RunConfig, i: int) -> bool:
    if i == 0 or i == cfg.rounds:
        return True
    return bool(cfg.eval_interval) and i % cfg.eval_interval == 0


def _evaluate(rt: _Runtime, report: RunReport, i: int) -> None:
    cfg = rt.cfg
    for kind in rt.kinds:
        td = rt.world.tasks[kind]
        per_client_vals: dict[str, list[float]] = {}
        for c in rt.clients_of(kind):
            if cfg.strategy == Strategy.FL:
                head_fn = rt.embed_fn(c.head)
                body, tail = c.body, c.tail
            elif cfg.strategy == Strategy.FESTA:
                head_fn = lambda x, _h=c.head: model.cnn_head_forward(x, _h)
                body, tail = rt.body, c.tail
            elif cfg.strategy == Strategy.SL:
                head_fn = rt.embed_fn(c.head)
                body, tail = rt.body, c.tail
            else:
                head_fn = rt.embed_fn(rt.head)
                body, tail = rt.body, c.tail
            out = _forward_numpy(td.test_images, head_fn, body, tail)
            for name, val in _metrics_for(kind, out, td.test_labels).items():
                report.rows.append((i, str(c.cid), kind, name, val))
                per_client_vals.setdefault(name, []).append(val)

        unified = _unified_metrics(rt, kind, td)
        if unified is None:
            unified = {name: float(np.mean(vals))
                       for name, vals in per_client_vals.items()}
        for name, val in unified.items():
            report.rows.append((i, "unified", kind, name, val))
        if i == cfg.rounds:
            report.final_task_metrics[kind] = unified


def _unified_metrics(rt: _Runtime, kind: str,
                     td: tasks.TaskData) -> dict[str, float] | None:
    cfg = rt.cfg
    if cfg.strategy == Strategy.SL:
        return None                    # no unified model exists
    tail = rt.initial.tails[kind].clone()
    tail.set_arrays(rt.tail_registry[kind])
    if cfg.strategy == Strategy.FL:
        head = rt.initial.head.clone()
        body = rt.initial.body.clone()
        h_arr, b_arr, t_arr = rt.fl_registry
        head.set_arrays(h_arr)
        body.set_arrays(b_arr)
        tail.set_arrays(t_arr[kind])
        out = _forward_numpy(td.test_images, rt.embed_fn(head), body, tail)
    elif cfg.strategy == Strategy.FESTA:
        chead = rt.initial.cnn_heads[kind].clone()
        chead.set_arrays(rt.head_registry[kind])
        out = _forward_numpy(td.test_images,
                             lambda x: model.cnn_head_forward(x, chead),
                             rt.body, tail)
    else:
        out = _forward_numpy(td.test_images, rt.embed_fn(rt.head), rt.body, tail)
    return _metrics_for(kind, out, td.test_labels)


# ---------------------------------------------------------------------------
# body update with task/client averaging


class _BodyAccumulator:
    def __init__(self, rt: _Runtime):
        self.rt = rt
        self.acc: dict[str, np.ndarray] = {}
        self.trace: dict[tuple[str, int], dict[str, np.ndarray]] = {}

    def add(self, kind: str, cid: int, grads: dict[str, np.ndarray]) -> None:
        n_k = len(self.rt.clients_of(kind))
        for name, g in grads.items():
            slot = self.acc.get(name)
            contrib = g.astype(np.float64) / n_k
            self.acc[name] = contrib if slot is None else slot + contrib
        if self.rt.cfg.retain_grad_trace:
            self.trace[(kind, cid)] = {n: g.copy() for n, g in grads.items()}

    def apply(self, report: RunReport) -> None:
        rt = self.rt
        k = len(rt.kinds)
        effective = {name: (a / k).astype(np.float32)
                     for name, a in self.acc.items()}
        rt.body_opt.step(effective)
        if rt.cfg.retain_grad_trace:
            report.grad_trace.append(
                {"per_client": self.trace, "applied": effective})


def _server_body_batch(rt: _Runtime, c: _Client, i: int,
                       feats: np.ndarray, ids) -> Tensor:
    """Server-side body forward on a batch; sends the BodyOutput message and
    returns the held output node for the later gradient seed."""
    x = Tensor(feats)
    out = model.body_forward(x, rt.body)
    rt.server_ends[c.cid].send(Message(
        MessageKind.BODY_OUTPUT, i, c.cid, rt.task_id(c.kind),
        tuple(int(s) for s in ids), (out.data,)))
    return out


def _body_grads_from(out: Tensor, g: np.ndarray) -> dict[str, np.ndarray]:
    """VJP seed via a scalar contraction: d/dw sum(out * g) with g constant
    equals seeding the output with g."""
    pseudo = tsum(mul(out, Tensor(g)))
    return backward(pseudo)


# ---------------------------------------------------------------------------
# strategy drivers


def _run_pfesta(rt: _Runtime, report: RunReport) -> None:
    cfg = rt.cfg
    if cfg.ablations.learnable_head:
        _run_pfesta_learnable(rt, report)
        return
    include_pos = not cfg.ablations.no_pos_embedding
    # upload phase: embed, permute, ship once; server caches
    for c in rt.clients:
        c.tail = rt.initial.tails[c.kind].clone()
        c.tail_opt = make_optimizer(cfg, c.tail.tensors())
        c.sampler = EpochSampler(c.cd.n_samples, cfg.seed, c.cid)
        with no_grad():
            feats = model.embed_patches(Tensor(c.cd.images), rt.head,
                                        include_pos=include_pos)
        for sid in range(c.cd.n_samples):
            key = (perm.identity_key(sid, rt.mc.n_tokens)
                   if cfg.ablations.no_permutation else
                   perm.generate_key(sid, rt.mc.n_tokens,
                                     perm.key_stream(cfg.seed, c.cid, sid)))
            c.keys[sid] = key
            shuffled = feats.data[sid][key.forward]
            c.link.send(Message(MessageKind.FEATURE_UPLOAD, 0, c.cid,
                                rt.task_id(c.kind), (sid,),
                                (np.ascontiguousarray(shuffled),)))
            m = rt.server_ends[c.cid].recv()
            rt.cache[(c.cid, m.sample_ids[0])] = m.payload[0].copy()
    cache_before = {k: v.tobytes() for k, v in rt.cache.items()}
    head_before = rt.head.to_bytes()

    _evaluate(rt, report, 0)
    for i in range(1, cfg.rounds + 1):
        acc = _BodyAccumulator(rt)
        for kind in rt.kinds:
            for c in rt.clients_of(kind):
                if rt.needs_broadcast(i):
                    rt.broadcast_tail(c, i)
                ids = c.sampler.next(cfg.batch_size)
                try:
                    feats = np.stack([rt.cache[(c.cid, sid)] for sid in ids])
                except KeyError as exc:
                    raise ProtocolViolation(
                        f"feature cache missing entry {exc}") from exc
                out = _server_body_batch(rt, c, i, feats, ids)
                reply, loss = rt.client_tail_step(c, c.link.recv(), permuted=True)
                c.link.send(reply)
                report.rows.append((i, str(c.cid), kind, "train_loss", loss))
                g = rt.server_ends[c.cid].recv().payload[0]
                acc.add(kind, c.cid, _body_grads_from(out, g))
        acc.apply(report)
        if rt.unify_rounds(i):
            for kind in rt.kinds:
                uploads = [rt.upload_tail(c, i) for c in rt.clients_of(kind)]
                rt.tail_registry[kind] = unify_arrays(uploads)
        if _should_eval(cfg, i):
            _evaluate(rt, report, i)

    report.head_intact = rt.head.to_bytes() == head_before
    report.cache_intact = all(rt.cache[k].tobytes() == v
                              for k, v in cache_before.items())


def _run_pfesta_learnable(rt: _Runtime, report: RunReport) -> None:
    """Learnable-head ablation: the cache is impossible with a trainable
    embedder, so features are re-sent per round with head gradients returned
    and the head unified alongside the tails."""
    cfg = rt.cfg
    include_pos = not cfg.ablations.no_pos_embedding
    head_reg = [a.copy() for a in rt.head.arrays()]
    for c in rt.clients:
        c.tail = rt.initial.tails[c.kind].clone()
        c.tail_opt = make_optimizer(cfg, c.tail.tensors())
        c.head = rt.initial.head.clone()
        c.head.set_trainable(True)
        c.head_opt = make_optimizer(cfg, c.head.tensors())
        c.sampler = EpochSampler(c.cd.n_samples, cfg.seed, c.cid)
        for sid in range(c.cd.n_samples):
            c.keys[sid] = (perm.identity_key(sid, rt.mc.n_tokens)
                           if cfg.ablations.no_permutation else
                           perm.generate_key(sid, rt.mc.n_tokens,
                                             perm.key_stream(cfg.seed, c.cid, sid)))
    _evaluate(rt, report, 0)
    for i in range(1, cfg.rounds + 1):
        acc = _BodyAccumulator(rt)
        for kind in rt.kinds:
            for c in rt.clients_of(kind):
                if rt.needs_broadcast(i):
                    msg = Message(MessageKind.HEAD_WEIGHTS_BROADCAST, i, c.cid,
                                  rt.task_id(c.kind), payload=tuple(head_reg))
                    rt.server_ends[c.cid].send(msg)
                    c.head.set_arrays(c.link.recv().payload)
                    rt.broadcast_tail(c, i)
                ids = c.sampler.next(cfg.batch_size)
                x = Tensor(c.cd.images[ids])
                feats = model.embed_patches(x, c.head, include_pos=include_pos)
                fwd = np.stack([c.keys[s].forward for s in ids])
                shuffled = perm.permute_batch(feats, fwd)
                c.link.send(Message(MessageKind.FEATURE_UPLOAD, i, c.cid,
                                    rt.task_id(c.kind),
                                    tuple(int(s) for s in ids),
                                    (shuffled.data,)))
                m = rt.server_ends[c.cid].recv()
                h = Tensor(m.payload[0], requires_grad=True)
                out = model.body_forward(h, rt.body)
                rt.server_ends[c.cid].send(Message(
                    MessageKind.BODY_OUTPUT, i, c.cid, rt.task_id(c.kind),
                    m.sample_ids, (out.data,)))
                reply, loss = rt.client_tail_step(c, c.link.recv(), permuted=True)
                c.link.send(reply)
                report.rows.append((i, str(c.cid), kind, "train_loss", loss))
                g = rt.server_ends[c.cid].recv().payload[0]
                acc.add(kind, c.cid, _body_grads_from(out, g))
                rt.server_ends[c.cid].send(Message(
                    MessageKind.HEAD_GRADIENT, i, c.cid, rt.task_id(c.kind),
                    m.sample_ids, (h.grad,)))
                gh = c.link.recv().payload[0]
                head_grads = backward(tsum(mul(shuffled, Tensor(gh))))
                c.head_opt.step(head_grads)
        acc.apply(report)
        if rt.unify_rounds(i):
            for kind in rt.kinds:
                ups_h, ups_t = [], []
                for c in rt.clients_of(kind):
                    c.link.send(Message(MessageKind.HEAD_WEIGHTS_UPLOAD, i,
                                        c.cid, rt.task_id(c.kind),
                                        payload=tuple(c.head.arrays())))
                    ups_h.append(list(rt.server_ends[c.cid].recv().payload))
                    ups_t.append(rt.upload_tail(c, i))
                rt.tail_registry[kind] = unify_arrays(ups_t)
                head_reg = unify_arrays(ups_h)   # embedder is task-agnostic
        if _should_eval(cfg, i):
            rt.head.set_arrays(head_reg)
            _evaluate(rt, report, i)


def _run_festa(rt: _Runtime, report: RunReport) -> None:
    cfg = rt.cfg
    for c in rt.clients:
        c.tail = rt.initial.tails[c.kind].clone()
        c.tail_opt = make_optimizer(cfg, c.tail.tensors())
        c.head = rt.initial.cnn_heads[c.kind].clone()
        c.head_opt = make_optimizer(cfg, c.head.tensors())
        c.sampler = EpochSampler(c.cd.n_samples, cfg.seed, c.cid)
    _evaluate(rt, report, 0)
    for i in range(1, cfg.rounds + 1):
        acc = _BodyAccumulator(rt)
        for kind in rt.kinds:
            for c in rt.clients_of(kind):
                if rt.needs_broadcast(i):
                    rt.server_ends[c.cid].send(Message(
                        MessageKind.HEAD_WEIGHTS_BROADCAST, i, c.cid,
                        rt.task_id(c.kind),
                        payload=tuple(rt.head_registry[kind])))
                    c.head.set_arrays(c.link.recv().payload)
                    rt.broadcast_tail(c, i)
                ids = c.sampler.next(cfg.batch_size)
                feats = model.cnn_head_forward(Tensor(c.cd.images[ids]), c.head)
                c.link.send(Message(MessageKind.FEATURE_UPLOAD, i, c.cid,
                                    rt.task_id(c.kind),
                                    tuple(int(s) for s in ids), (feats.data,)))
                m = rt.server_ends[c.cid].recv()
                h = Tensor(m.payload[0], requires_grad=True)
                out = model.body_forward(h, rt.body)
                rt.server_ends[c.cid].send(Message(
                    MessageKind.BODY_OUTPUT, i, c.cid, rt.task_id(c.kind),
                    m.sample_ids, (out.data,)))
                reply, loss = rt.client_tail_step(c, c.link.recv(),
                                                  permuted=False)
                c.link.send(reply)
                report.rows.append((i, str(c.cid), kind, "train_loss", loss))
                g = rt.server_ends[c.cid].recv().payload[0]
                acc.add(kind, c.cid, _body_grads_from(out, g))
                rt.server_ends[c.cid].send(Message(
                    MessageKind.HEAD_GRADIENT, i, c.cid, rt.task_id(c.kind),
                    m.sample_ids, (h.grad,)))
                gh = c.link.recv().payload[0]
                c.head_opt.step(backward(tsum(mul(feats, Tensor(gh)))))
        acc.apply(report)
        if rt.unify_rounds(i):
            for kind in rt.kinds:
                ups_h, ups_t = [], []
                for c in rt.clients_of(kind):
                    c.link.send(Message(MessageKind.HEAD_WEIGHTS_UPLOAD, i,
                                        c.cid, rt.task_id(c.kind),
                                        payload=tuple(c.head.arrays())))
                    ups_h.append(list(rt.server_ends[c.cid].recv().payload))
                    ups_t.append(rt.upload_tail(c, i))
                rt.head_registry[kind] = unify_arrays(ups_h)
                rt.tail_registry[kind] = unify_arrays(ups_t)
        if _should_eval(cfg, i):
            _evaluate(rt, report, i)


def _run_sl(rt: _Runtime, report: RunReport) -> None:
    """Sequential split learning: per-client batch exchange with immediate
    body updates; clients keep their own heads and tails off the wire."""
    cfg = rt.cfg
    for c in rt.clients:
        c.tail = rt.initial.tails[c.kind].clone()
        c.tail_opt = make_optimizer(cfg, c.tail.tensors())
        c.head = rt.initial.head.clone()
        c.head.set_trainable(True)
        c.head_opt = make_optimizer(cfg, c.head.tensors())
        c.sampler = EpochSampler(c.cd.n_samples, cfg.seed, c.cid)
    _evaluate(rt, report, 0)
    for i in range(1, cfg.rounds + 1):
        for kind in rt.kinds:
            for c in rt.clients_of(kind):
                ids = c.sampler.next(cfg.batch_size)
                feats = rt.embed_fn(c.head)(Tensor(c.cd.images[ids]))
                c.link.send(Message(MessageKind.FEATURE_UPLOAD, i, c.cid,
                                    rt.task_id(c.kind),
                                    tuple(int(s) for s in ids), (feats.data,)))
                m = rt.server_ends[c.cid].recv()
                h = Tensor(m.payload[0], requires_grad=True)
                out = model.body_forward(h, rt.body)
                rt.server_ends[c.cid].send(Message(
                    MessageKind.BODY_OUTPUT, i, c.cid, rt.task_id(c.kind),
                    m.sample_ids, (out.data,)))
                reply, loss = rt.client_tail_step(c, c.link.recv(),
                                                  permuted=False)
                c.link.send(reply)
                report.rows.append((i, str(c.cid), kind, "train_loss", loss))
                g = rt.server_ends[c.cid].recv().payload[0]
                rt.body_opt.step({n: a for n, a in
                                  _body_grads_from(out, g).items()})
                rt.server_ends[c.cid].send(Message(
                    MessageKind.HEAD_GRADIENT, i, c.cid, rt.task_id(c.kind),
                    m.sample_ids, (h.grad,)))
                gh = c.link.recv().payload[0]
                c.head_opt.step(backward(tsum(mul(feats, Tensor(gh)))))
        if _should_eval(cfg, i):
            _evaluate(rt, report, i)


def _run_fl(rt: _Runtime, report: RunReport) -> None:
    """FedAvg on full local models: head+body averaged over all clients,
    tails averaged within task, every n rounds."""
    cfg = rt.cfg
    rt.fl_registry = ([a.copy() for a in rt.head.arrays()],
                      [a.copy() for a in rt.body.arrays()],
                      {k: [a.copy() for a in arrs]
                       for k, arrs in rt.tail_registry.items()})
    for c in rt.clients:
        c.head = rt.initial.head.clone()
        c.head.set_trainable(True)
        c.body = rt.initial.body.clone()
        c.tail = rt.initial.tails[c.kind].clone()
        c.full_opt = make_optimizer(
            cfg, c.head.tensors() + c.body.tensors() + c.tail.tensors())
        c.sampler = EpochSampler(c.cd.n_samples, cfg.seed, c.cid)
    _evaluate(rt, report, 0)
    for i in range(1, cfg.rounds + 1):
        for kind in rt.kinds:
            for c in rt.clients_of(kind):
                if rt.needs_broadcast(i):
                    h_arr, b_arr, t_arr = rt.fl_registry
                    payload = tuple(h_arr) + tuple(b_arr) + tuple(t_arr[kind])
                    rt.server_ends[c.cid].send(Message(
                        MessageKind.FULL_MODEL_BROADCAST, i, c.cid,
                        rt.task_id(c.kind), payload=payload))
                    m = c.link.recv()
                    nh, nb = len(h_arr), len(b_arr)
                    c.head.set_arrays(m.payload[:nh])
                    c.body.set_arrays(m.payload[nh:nh + nb])
                    c.tail.set_arrays(m.payload[nh + nb:])
                ids = c.sampler.next(cfg.batch_size)
                feats = rt.embed_fn(c.head)(Tensor(c.cd.images[ids]))
                out = model.body_forward(feats, c.body)
                logits = model.tail_forward(out, c.tail)
                loss = mul(task_loss(kind, logits, rt.labels_for(c, ids)),
                           Tensor(np.asarray(rt.scale(kind), dtype=logits.dtype)))
                c.full_opt.step(backward(loss))
                report.rows.append((i, str(c.cid), kind, "train_loss",
                                    loss.item() / rt.scale(kind)))
        if rt.unify_rounds(i):
            ups_h, ups_b = [], []
            ups_t: dict[str, list] = {k: [] for k in rt.kinds}
            for kind in rt.kinds:
                for c in rt.clients_of(kind):
                    payload = (tuple(c.head.arrays()) + tuple(c.body.arrays())
                               + tuple(c.tail.arrays()))
                    c.link.send(Message(MessageKind.FULL_MODEL_UPLOAD, i,
                                        c.cid, rt.task_id(c.kind),
                                        payload=payload))
                    m = rt.server_ends[c.cid].recv()
                    nh = len(c.head.arrays())
                    nb = len(c.body.arrays())
                    ups_h.append(list(m.payload[:nh]))
                    ups_b.append(list(m.payload[nh:nh + nb]))
                    ups_t[kind].append(list(m.payload[nh + nb:]))
            rt.fl_registry = (unify_arrays(ups_h), unify_arrays(ups_b),
                              {k: unify_arrays(v) for k, v in ups_t.items()
                               if v})
            rt.tail_registry = {k: [a.copy() for a in arrs]
                                for k, arrs in rt.fl_registry[2].items()}
        if _should_eval(cfg, i):
            _evaluate(rt, report, i)


# ---------------------------------------------------------------------------
# cost parameter binding


def cost_params_from_parts(strategy: Strategy, mc: ModelConfig, batch_size: int,
                           rounds: int, unify_interval: int, kind: str,
                           n_samples: int) -> costs.CostParams:
    """Closed-form cost parameters from model geometry and run shape."""
    f = mc.n_tokens * mc.d
    head_elems = model.HeadParams(mc).element_count
    if Strategy(strategy) == Strategy.FESTA:
        head_elems = model.CnnHeadParams(mc).element_count
    return costs.CostParams(
        D=n_samples, B=batch_size, R=rounds, n=unify_interval, F=f, G=f,
        P_h=head_elems, P_b=model.BodyParams(mc).element_count,
        P_t=model.init_tail(kind, mc, 0).element_count)


def cost_params_for(config: RunConfig, world: tasks.SyntheticWorld,
                    mc: ModelConfig, client_id: int) -> costs.CostParams:
    """Bind the closed-form cost parameters to one simulated client."""
    for kind, td in world.tasks.items():
        for cd in td.clients:
            if cd.client_id == client_id:
                return cost_params_from_parts(
                    config.strategy, mc, config.batch_size, config.rounds,
                    config.unify_interval, kind, cd.n_samples)
    raise ConfigError(f"unknown client id {client_id}")


# ---------------------------------------------------------------------------
# report serialization


def write_report(report: RunReport, outdir) -> None:
    """metrics.csv, traffic.csv, summary.txt and the resolved config echo."""
    import os
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "metrics.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "client", "task", "metric", "value"])
        for row in report.rows:
            w.writerow([row[0], row[1], row[2], row[3], repr(float(row[4]))])
    report.ledger.write_csv(os.path.join(outdir, "traffic.csv"))
    with open(os.path.join(outdir, "config.txt"), "w") as fh:
        for key, val in report.config.items():
            fh.write(f"{key} = {val}\n")
    with open(os.path.join(outdir, "summary.txt"), "w") as fh:
        fh.write("permsplit run summary\n")
        fh.write("=====================\n")
        for key, val in report.config.items():
            fh.write(f"{key} = {val}\n")
        fh.write(f"trained_rounds = {report.trained_rounds}\n")
        ab = [k.removeprefix("ablate_") for k, v in report.config.items()
              if k.startswith("ablate_") and v]
        fh.write(f"ablations = {','.join(ab) if ab else 'none'}\n")
        fh.write("final metrics:\n")
        for kind, metrics in report.final_task_metrics.items():
            for name, val in metrics.items():
                fh.write(f"  {kind}.{name} = {val:.6f}\n")
        fh.write("message kinds seen: "
                 + ",".join(sorted(k.name for k in report.kinds_seen)) + "\n")
        fh.write(f"total payload elements = {report.ledger.elements()}\n")
        fh.write(f"total payload bytes = {report.ledger.bytes()}\n")

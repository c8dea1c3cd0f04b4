"""Distributed robust Kalman filtering with event-triggered information exchange.

Every node runs the same synchronous round:
correct -> decide transmit -> exchange -> fuse -> predict -> propagate bar pairs.
A node that stays silent is represented at its out-neighbours by its *bar
pair*, a copy of its last transmitted belief pushed forward in time with the
robust prediction. Every node that needs it can recompute it, so nothing is
sent.

The network is simulated with stacked ``(N, n, n)`` arrays. The node-level
functions (:func:`correct`, :func:`decide_transmit`, :func:`fuse`,
:func:`predict`, :func:`propagate_bar`) spell out the protocol for a single
node and serve as the reference the batched step is tested against.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, TextIO

import numpy as np

from .errors import ConfigError, InvariantViolation, ProtocolError
from .graph import SensorNetwork
from .lingauss import (PSD_SLACK, GaussianInfo, cholesky, kl_info, min_eig, spd_inv,
                       spd_solve, symmetrize)
from .robust_filter import ROOT_TOL, MAX_ITER, StateSpaceModel, predict_arrays, robust_correct


@dataclass(frozen=True)
class TriggerParams:
    """Thresholds of the transmission rule: Mahalanobis ``alpha``, precision band ``beta``/``delta``."""

    alpha: float = 10.0
    beta: float = 0.2
    delta: float = 0.5

    def __post_init__(self):
        if min(self.alpha, self.beta, self.delta) <= 0:
            raise ConfigError("trigger parameters alpha, beta, delta must be positive")

    def kl_budget(self, n: int) -> float:
        return 0.5 * (self.alpha + self.beta * n + n * math.log1p(self.delta))

    def reverse_kl_bound(self, n: int) -> float:
        """Bound on ``KL(filtered || bar)`` implied by the rule (the budget bounds the other direction)."""
        return 0.5 * ((1 + self.delta) * self.alpha + n * self.delta + n * math.log1p(self.beta))


KINDS = ("rdkf", "rdkfloc", "dkf")


@dataclass(frozen=True)
class FilterVariant:
    """A filter flavour and its trigger.

    ``local_tolerances`` maps node ids to ``b^i`` (RDKFLOC only); nodes
    missing from it use ``comm_tolerance``, which defaults to ``tolerance``.
    """

    name: str
    kind: str
    trigger: TriggerParams
    tolerance: float = 0.0
    local_tolerances: Optional[Mapping[int, float]] = None
    comm_tolerance: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown variant kind {self.kind!r}; expected one of {KINDS}")
        if self.tolerance < 0:
            raise ConfigError("tolerance must be nonnegative")
        if self.kind == "rdkfloc" and self.local_tolerances is None:
            raise ConfigError("RDKFLOC needs local tolerances")

    @classmethod
    def rdkf(cls, b: float, trigger: TriggerParams, name: str = "RDKF") -> "FilterVariant":
        return cls(name, "rdkf", trigger, b)

    @classmethod
    def dkf(cls, trigger: TriggerParams, name: str = "DKF") -> "FilterVariant":
        return cls(name, "dkf", trigger, 0.0)

    @classmethod
    def rdkfloc(cls, b: float, local: Mapping[int, float], trigger: TriggerParams,
                comm_tolerance: Optional[float] = None, name: str = "RDKFLOC") -> "FilterVariant":
        return cls(name, "rdkfloc", trigger, b, dict(local), comm_tolerance)

    def node_tolerances(self, num_nodes: int) -> np.ndarray:
        if self.kind == "dkf":
            return np.zeros(num_nodes)
        if self.kind == "rdkf":
            return np.full(num_nodes, self.tolerance)
        comm = self.tolerance if self.comm_tolerance is None else self.comm_tolerance
        tol = np.full(num_nodes, comm)
        for i, b in self.local_tolerances.items():
            tol[i] = b
        return tol


def rdkfloc_variant(model: StateSpaceModel, network: SensorNetwork, b: float,
                    trigger: TriggerParams, comm_mode: str = "global",
                    name: str = "RDKFLOC") -> FilterVariant:
    """RDKFLOC with ``b^i`` from the stationary least favorable law.

    ``comm_mode="global"`` gives non-sensor nodes the global ``b``;
    ``"state"`` gives them the divergence of the ``x_{t+1}`` block alone.
    """
    from .least_favorable import local_tolerances, robust_steady_state, state_tolerance

    steady = robust_steady_state(model, b)
    local = local_tolerances(steady, model)
    by_node = {network.sensors[k]: v for k, v in local.items()}
    if comm_mode == "global":
        comm = b
    elif comm_mode == "state":
        comm = state_tolerance(steady)
    else:
        raise ConfigError(f"unknown comm_mode {comm_mode!r}")
    return FilterVariant.rdkfloc(b, by_node, trigger, comm, name)


# -- single node protocol ------------------------------------------------------

@dataclass(frozen=True)
class NodeState:
    """Memory of one node.

    ``bars`` holds the bar pair of the node itself and of every in-neighbour.
    """

    node: int
    is_sensor: bool
    pred: GaussianInfo
    filt: Optional[GaussianInfo] = None
    fused: Optional[GaussianInfo] = None
    bars: Mapping[int, GaussianInfo] = field(default_factory=dict)
    transmitted: Mapping[int, int] = field(default_factory=dict)
    theta: float = 0.0
    theta_bar: float = 0.0
    since_transmit: int = 0


def correct(node: NodeState, sensor=None, y=None) -> NodeState:
    """Measurement update at a sensor; other nodes pass the prediction through."""
    if node.is_sensor:
        if sensor is None or y is None:
            raise ProtocolError(f"sensor node {node.node} needs its measurement")
        return replace(node, filt=robust_correct(node.pred, sensor.C, sensor.R, y))
    if y is not None:
        raise ProtocolError(f"measurement supplied to non-sensor node {node.node}")
    return replace(node, filt=node.pred)


def _keep_silent(q, omega, q_bar, psi_bar, trig: TriggerParams, slack: float = PSD_SLACK):
    """Batched rule: True where the bar pair is close enough to the filtered pair."""
    d = spd_solve(omega, q) - spd_solve(psi_bar, q_bar)
    maha = np.einsum("...i,...ij,...j->...", d, omega, d)
    lower = min_eig(psi_bar - omega / (1.0 + trig.beta)) >= -slack
    upper = min_eig((1.0 + trig.delta) * omega - psi_bar) >= -slack
    return (maha <= trig.alpha) & lower & upper


def decide_transmit(node: NodeState, t: int, trigger: TriggerParams) -> int:
    if t == 0:
        return 1
    bar = node.bars.get(node.node)
    if bar is None or node.filt is None:
        raise ProtocolError(f"node {node.node} lacks its filtered or bar pair at t={t}")
    silent = _keep_silent(node.filt.q, node.filt.omega, bar.q, bar.omega, trigger)
    return 0 if bool(silent) else 1


def fuse(node: NodeState, received: Mapping[int, Optional[GaussianInfo]],
         consensus_row: np.ndarray, delta: float) -> NodeState:
    """Convex combination over ``N_i + {i}``; a silent neighbour ``j`` (``received[j] is None``)
    contributes its bar pair shrunk by ``1/(1+delta)``."""
    i = node.node
    q = consensus_row[i] * node.filt.q
    omega = consensus_row[i] * node.filt.omega
    for j in np.flatnonzero(consensus_row):
        if j == i:
            continue
        if j not in received:
            raise ProtocolError(f"node {i} has no data from in-neighbour {j}")
        pair = received[j]
        if pair is None:
            if j not in node.bars:
                raise ProtocolError(f"node {i} has no bar pair for silent neighbour {j}")
            bar = node.bars[j]
            pair = GaussianInfo(bar.q / (1.0 + delta), bar.omega / (1.0 + delta))
        q = q + consensus_row[j] * pair.q
        omega = omega + consensus_row[j] * pair.omega
    return replace(node, fused=GaussianInfo(q, symmetrize(omega)))


def predict(node: NodeState, A, Q, b: float, tol: float = ROOT_TOL, max_iter: int = MAX_ITER) -> NodeState:
    q, psi, theta, _ = predict_arrays(node.fused.q, node.fused.omega, A, Q, b, tol, max_iter)
    return replace(node, pred=GaussianInfo(q, psi), theta=float(theta))


def propagate_bar(bar: Optional[GaussianInfo], transmitted: Optional[GaussianInfo], A, Q, b: float,
                  tol: float = ROOT_TOL, max_iter: int = MAX_ITER):
    """Next bar pair of one node from its breve pair; returns ``(pair, theta_bar)``.

    The breve pair is the transmitted filtered pair when the owner spoke, its
    previous bar pair otherwise.
    """
    breve = transmitted if transmitted is not None else bar
    if breve is None:
        raise ProtocolError("neither a transmitted pair nor a previous bar pair is available")
    q, psi, theta, _ = predict_arrays(breve.q, breve.omega, A, Q, b, tol, max_iter)
    return GaussianInfo(q, psi), float(theta)


# -- batched network -----------------------------------------------------------

@dataclass(frozen=True)
class NetworkContext:
    """Model and network data shared by every step, with per-node measurement terms."""

    model: StateSpaceModel
    network: SensorNetwork
    info_matrix: np.ndarray = field(init=False, repr=False)
    info_gain: np.ndarray = field(init=False, repr=False)
    omega_bar: float = field(init=False)

    def __post_init__(self):
        net, model = self.network, self.model
        if len(net.sensors) != len(model.sensors):
            raise ConfigError(f"network has {len(net.sensors)} sensor nodes, model has "
                              f"{len(model.sensors)} sensors")
        n, p, N = model.n, model.p, net.num_nodes
        info = np.zeros((N, n, n))
        gain = np.zeros((N, n, p))
        for k, i in enumerate(net.sensors):
            s, sl = model.sensors[k], model.sensor_slices[k]
            info[i] = s.info_matrix
            gain[i][:, sl] = s.info_gain
        object.__setattr__(self, "info_matrix", info)
        object.__setattr__(self, "info_gain", gain)
        q_inv = spd_inv(model.Q)
        bounds = [np.linalg.eigvalsh(q_inv + s.info_matrix)[-1] for s in model.sensors]
        object.__setattr__(self, "omega_bar", float(max(bounds + [np.linalg.eigvalsh(q_inv)[-1]])))

    @property
    def sensor_mask(self) -> np.ndarray:
        mask = np.zeros(self.network.num_nodes, dtype=bool)
        mask[list(self.network.sensors)] = True
        return mask


@dataclass
class NetworkState:
    """Stacked per-node memory; index 0 of every array is the node id."""

    t: int
    q_pred: np.ndarray
    psi: np.ndarray
    q_filt: np.ndarray
    omega_filt: np.ndarray
    q_fused: np.ndarray
    omega_fused: np.ndarray
    q_bar: np.ndarray
    psi_bar: np.ndarray
    c: np.ndarray
    theta: np.ndarray
    theta_bar: np.ndarray
    since_transmit: np.ndarray

    @classmethod
    def initial(cls, ctx: NetworkContext) -> "NetworkState":
        m, N = ctx.model, ctx.network.num_nodes
        psi0 = symmetrize(spd_inv(m.V0))
        psi = np.broadcast_to(psi0, (N,) + psi0.shape).copy()
        q = np.broadcast_to(psi0 @ m.x0_mean, (N, m.n)).copy()
        z = np.zeros(N)
        return cls(0, q, psi, q.copy(), psi.copy(), q.copy(), psi.copy(), q.copy(), psi.copy(),
                   np.ones(N, dtype=int), z.copy(), z.copy(), np.zeros(N, dtype=int))

    def node(self, ctx: NetworkContext, i: int) -> NodeState:
        """Single-node view holding the bar pairs of ``i`` and its in-neighbours."""
        tracked = [i] + ctx.network.in_neighbors(i)
        bars = {j: GaussianInfo(self.q_bar[j].copy(), self.psi_bar[j].copy()) for j in tracked}
        return NodeState(i, ctx.network.is_sensor(i), GaussianInfo(self.q_pred[i].copy(), self.psi[i].copy()),
                         GaussianInfo(self.q_filt[i].copy(), self.omega_filt[i].copy()),
                         GaussianInfo(self.q_fused[i].copy(), self.omega_fused[i].copy()),
                         bars, {j: int(self.c[j]) for j in tracked}, float(self.theta[i]),
                         float(self.theta_bar[i]), int(self.since_transmit[i]))

    def filtered_means(self) -> np.ndarray:
        return spd_solve(self.omega_filt, self.q_filt)


@dataclass
class StepDiagnostics:
    """Per-step invariant measurements, filled only when checks are on."""

    max_eig_filt: float
    min_eig_filt: float
    max_eig_fused: float
    kl_silent_max: float  # KL(filtered || bar) over silent nodes
    kl_silent_reverse_max: float  # KL(bar || filtered) over silent nodes
    omega_violations: int
    fused_violations: int
    kl_violations: int
    kl_reverse_violations: int


def step_network(state: NetworkState, y: np.ndarray, ctx: NetworkContext, variant: FilterVariant,
                 tolerances: Optional[np.ndarray] = None, checks: bool = False,
                 raise_on_violation: bool = False,
                 tol: float = ROOT_TOL, max_iter: int = MAX_ITER):
    """One synchronous round for the whole network. Returns ``(state, diagnostics or None)``.

    ``y`` is the stacked measurement of all sensors at time ``state.t``.
    """
    model, trig = ctx.model, variant.trigger
    pi = ctx.network.consensus
    b = variant.node_tolerances(ctx.network.num_nodes) if tolerances is None else tolerances
    b_arg = 0.0 if not np.any(b) else b
    A, Q, n = model.A, model.Q, model.n
    t = state.t

    # correction (non-sensors have zero information terms)
    omega = symmetrize(state.psi + ctx.info_matrix)
    q = state.q_pred + np.einsum("kij,j->ki", ctx.info_gain, np.asarray(y, dtype=float))

    # transmission decision
    if t == 0:
        c = np.ones(ctx.network.num_nodes, dtype=int)
    else:
        c = np.where(_keep_silent(q, omega, state.q_bar, state.psi_bar, trig), 0, 1)

    # exchange and fusion: what node j offers its out-neighbours
    shrink = 1.0 / (1.0 + trig.delta)
    cf = c.astype(float)
    offer_q = cf[:, None] * q + (1 - cf)[:, None] * shrink * state.q_bar
    offer_o = cf[:, None, None] * omega + (1 - cf)[:, None, None] * shrink * state.psi_bar
    self_w = np.diag(pi).copy()
    off = pi - np.diag(self_w)
    q_f = self_w[:, None] * q + off @ offer_q
    omega_f = symmetrize(self_w[:, None, None] * omega + np.einsum("ij,jkl->ikl", off, offer_o))

    # robust prediction
    q_pred, psi, theta, _ = predict_arrays(q_f, omega_f, A, Q, b_arg, tol, max_iter)

    # bar propagation, one computation per owner shared by all its out-neighbours
    q_breve = np.where(c[:, None] == 1, q, state.q_bar)
    o_breve = np.where(c[:, None, None] == 1, omega, state.psi_bar)
    q_bar, psi_bar, theta_bar, _ = predict_arrays(q_breve, o_breve, A, Q, b_arg, tol, max_iter)

    diag = None
    if checks:
        diag = _check(state, q, omega, omega_f, c, ctx, trig, raise_on_violation)

    new = NetworkState(t + 1, q_pred, symmetrize(psi), q, omega, q_f, omega_f, q_bar,
                       symmetrize(psi_bar), c, np.broadcast_to(theta, c.shape).astype(float),
                       np.broadcast_to(theta_bar, c.shape).astype(float),
                       np.where(c == 1, 0, state.since_transmit + 1))
    return new, diag


def _check(state, q, omega, omega_f, c, ctx, trig, raise_on_violation) -> StepDiagnostics:
    n = ctx.model.n
    eig = np.linalg.eigvalsh(omega)
    eig_f = np.linalg.eigvalsh(omega_f)
    bound = ctx.omega_bar + 1e-9
    ov = int(np.sum(eig[:, -1] > bound))
    fv = int(np.sum(eig_f[:, -1] > bound))
    kl_max = kl_rev_max = 0.0
    kv = krv = 0
    silent = np.flatnonzero(c == 0)
    if silent.size:
        budget = trig.kl_budget(n)
        kl = kl_info(q[silent], omega[silent], state.q_bar[silent], state.psi_bar[silent])
        kl_rev = kl_info(state.q_bar[silent], state.psi_bar[silent], q[silent], omega[silent])
        kl_max, kl_rev_max = float(kl.max()), float(kl_rev.max())
        kv, krv = int(np.sum(kl > budget)), int(np.sum(kl_rev > budget))
    diag = StepDiagnostics(float(eig[:, -1].max()), float(eig[:, 0].min()), float(eig_f[:, -1].max()),
                           kl_max, kl_rev_max, ov, fv, kv, krv)
    if raise_on_violation and (ov or fv or kv):
        raise InvariantViolation(f"invariant check failed at t={state.t}: {diag}")
    return diag


@dataclass
class FilterRun:
    """Output of :func:`run_network_filter` over ``T`` steps."""

    x_filt: np.ndarray     # (T, N, n)
    c: np.ndarray          # (T, N)
    theta: np.ndarray      # (T, N)
    theta_bar: np.ndarray  # (T, N)
    diagnostics: list = field(default_factory=list)


def run_network_filter(ctx: NetworkContext, variant: FilterVariant, ys: np.ndarray,
                       checks: bool = False, raise_on_violation: bool = False,
                       states: Optional[np.ndarray] = None, trace: Optional[TextIO] = None) -> FilterRun:
    """Filter a measurement sequence ``ys`` (T, p) with every node of the network.

    With ``trace`` set, one JSON line per node and step is written; ``states``
    (T+1, n) is then used for the squared-error column.
    """
    T = ys.shape[0]
    N, n = ctx.network.num_nodes, ctx.model.n
    b = variant.node_tolerances(N)
    x = np.empty((T, N, n))
    c = np.empty((T, N), dtype=int)
    th = np.empty((T, N))
    thb = np.empty((T, N))
    diags = []
    state = NetworkState.initial(ctx)
    for t in range(T):
        state, d = step_network(state, ys[t], ctx, variant, b, checks, raise_on_violation)
        x[t] = state.filtered_means()
        c[t], th[t], thb[t] = state.c, state.theta, state.theta_bar
        if d is not None:
            diags.append(d)
        if trace is not None:
            err = np.sum((x[t] - states[t]) ** 2, axis=1) if states is not None else [None] * N
            for i in range(N):
                e = None if err[i] is None else float(err[i])
                trace.write(json.dumps({"t": t, "node": i, "c": int(c[t, i]), "theta": float(th[t, i]),
                                        "theta_bar": float(thb[t, i]), "mse_contribution": e}) + "\n")
    return FilterRun(x, c, th, thb, diags)

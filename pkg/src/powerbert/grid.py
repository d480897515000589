"""Five-area load-frequency-control simulator sampled on the 4 s AGC cycle.

Per area the continuous model is

    d(dw)/dt  = f0 / (2 H) * (Pm - PL - PE - D dw)
    T dPm/dt  = -Pm + Pc - dw / R
    PE_i      = sum of tie flows leaving area i

with tie flows ``P_ij = T_ij (delta_i - delta_j)`` and area angles advancing at
``2 pi dw``.  Angles are kept relative to area 1 so the model has no marginal
mode.  The model is discretised exactly (zero-order hold over a slot), and
each area runs integral AGC on its ACE: ``Pc += -K * ACE * dt``.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from . import attacks
from .estimation import Estimator, bdd_check, estimate_state, incidence_matrix, tie_line_estimator

KIND_CODES = {"none": 0, attacks.FDIA: 1, attacks.TDA: 2}
SAFE_BAND_HZ = 0.5


class UnstableConfigError(ValueError):
    pass


@dataclass
class AreaParams:
    a: float = 1.0           # ACE weight on export deviation
    b: float = 0.85          # ACE weight on frequency deviation (pu/Hz)
    inertia: float = 5.0     # H, s
    damping: float = 1 / 120  # pu/Hz
    droop: float = 2.4       # Hz/pu
    turbine_tc: float = 0.4  # s, lumped governor + turbine lag
    agc_gain: float = 0.04   # 1/s


BIAS_FACTOR = 2.0


def default_areas() -> list[AreaParams]:
    # Frequency bias above the natural response (D + 1/R) so that a disturbance
    # in one area is visible in the ACE of the others.
    inertias = [5.0, 4.5, 5.5, 4.0, 6.0]
    droops = [2.4, 2.6, 2.2, 2.5, 2.3]
    areas = []
    for h, r in zip(inertias, droops):
        d = 1 / 120
        areas.append(AreaParams(b=BIAS_FACTOR * (d + 1 / r), inertia=h, damping=d, droop=r))
    return areas


DEFAULT_TIE_LINES = [(1, 3), (1, 5), (3, 2), (5, 4), (2, 4)]


@dataclass
class GridConfig:
    area_count: int = 5
    tie_lines: list = field(default_factory=lambda: [list(t) for t in DEFAULT_TIE_LINES])
    sync_coeff: list | float = 0.545     # pu/(Hz s), per tie line or shared
    areas: list = field(default_factory=default_areas)
    slot_seconds: float = 4.0
    nominal_hz: float = 60.0
    trace_length: int = 300
    burn_in: int = 50
    load_persistence: float = 0.95
    load_std: float = 0.01
    meas_noise_std: float = 0.005

    def __post_init__(self):
        self.areas = [a if isinstance(a, AreaParams) else AreaParams(**a) for a in self.areas]
        self.tie_lines = [tuple(int(v) for v in t) for t in self.tie_lines]
        if len(self.areas) != self.area_count:
            raise ValueError(f"{len(self.areas)} area parameter sets for {self.area_count} areas")
        validate_topology(self.area_count, self.tie_lines)
        if self.trace_length < 1 or self.burn_in < 0:
            raise ValueError("trace_length must be >= 1 and burn_in >= 0")

    @property
    def sync(self) -> np.ndarray:
        s = np.broadcast_to(np.asarray(self.sync_coeff, dtype=float), (len(self.tie_lines),)).copy()
        if np.any(s <= 0):
            raise ValueError("synchronizing coefficients must be positive")
        return s

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tie_lines"] = [list(t) for t in self.tie_lines]
        return d

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def validate_topology(area_count: int, tie_lines) -> None:
    seen = set()
    for i, j in tie_lines:
        if i == j:
            raise ValueError(f"self-loop on area {i}")
        if not (1 <= i <= area_count and 1 <= j <= area_count):
            raise ValueError(f"tie line {(i, j)} references an unknown area")
        key = frozenset((i, j))
        if key in seen:
            raise ValueError(f"duplicate tie line {(i, j)}")
        seen.add(key)
    reach = {1}
    frontier = [1]
    while frontier:
        k = frontier.pop()
        for i, j in tie_lines:
            for u, v in ((i, j), (j, i)):
                if u == k and v not in reach:
                    reach.add(v)
                    frontier.append(v)
    if len(reach) != area_count:
        raise ValueError("tie-line graph is not connected")


def neighbours(tie_lines, area: int) -> set[int]:
    return {j if i == area else i for i, j in tie_lines if area in (i, j)}


@dataclass
class GridState:
    """Slot snapshot.  ``angles`` are area angles relative to area 1 (rad)."""

    dw: np.ndarray
    pm: np.ndarray
    angles: np.ndarray
    command: np.ndarray
    t: int = 0

    @classmethod
    def zero(cls, area_count: int = 5) -> "GridState":
        z = np.zeros(area_count)
        return cls(z.copy(), z.copy(), np.zeros(area_count - 1), z.copy(), 0)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.dw, self.pm, self.angles])


def compute_ace(dw, dpe, params: list[AreaParams]) -> np.ndarray:
    a = np.array([p.a for p in params])
    b = np.array([p.b for p in params])
    return a * np.asarray(dpe, dtype=float) + b * np.asarray(dw, dtype=float)


class GridModel:
    """Discretised plant plus the measurement/estimation chain."""

    def __init__(self, config: GridConfig | None = None):
        self.config = cfg = config or GridConfig()
        n = cfg.area_count
        self.n = n
        self.incidence = incidence_matrix(n, cfg.tie_lines)
        # flows = flow_map @ angles (areas 2..n; area 1 is the reference).  The
        # sync coefficient is per Hz*s of frequency difference and angles
        # advance at 2*pi*dw, hence the 1/(2 pi).
        self.flow_map = cfg.sync[:, None] * self.incidence.T[:, 1:] / (2 * np.pi)

        H = np.array([a.inertia for a in cfg.areas])
        D = np.array([a.damping for a in cfg.areas])
        R = np.array([a.droop for a in cfg.areas])
        T = np.array([a.turbine_tc for a in cfg.areas])
        k = cfg.nominal_hz / (2 * H)
        ns = 2 * n + (n - 1)
        A = np.zeros((ns, ns))
        Bu = np.zeros((ns, 2 * n))  # inputs: commands, loads
        iw, ip, ia = slice(0, n), slice(n, 2 * n), slice(2 * n, ns)
        A[iw, iw] = np.diag(-k * D)
        A[iw, ip] = np.diag(k)
        A[iw, ia] = -k[:, None] * (self.incidence @ self.flow_map)
        A[ip, iw] = np.diag(-1 / (T * R))
        A[ip, ip] = np.diag(-1 / T)
        A[ia, iw] = 2 * np.pi * (np.eye(n)[1:] - np.eye(n)[[0] * (n - 1)])
        Bu[ip, :n] = np.diag(1 / T)
        Bu[iw, n:] = np.diag(-k)
        self.A_c, self.B_c = A, Bu
        aug = np.zeros((ns + 2 * n, ns + 2 * n))
        aug[:ns, :ns] = A
        aug[:ns, ns:] = Bu
        E = expm(aug * cfg.slot_seconds)
        self.Ad = E[:ns, :ns]
        self.Bd = E[:ns, ns:]
        self.estimator: Estimator = tie_line_estimator(n, cfg.tie_lines, cfg.meas_noise_std)
        self.ace_a = np.array([a.a for a in cfg.areas])
        self.ace_b = np.array([a.b for a in cfg.areas])
        self.agc_gain = np.array([a.agc_gain for a in cfg.areas])

    def flows(self, state: GridState) -> np.ndarray:
        return self.flow_map @ state.angles

    def export(self, state: GridState) -> np.ndarray:
        return self.incidence @ self.flows(state)

    def step(self, state: GridState, commands, loads) -> GridState:
        commands = np.asarray(commands, dtype=float)
        loads = np.asarray(loads, dtype=float)
        if commands.shape != (self.n,) or loads.shape != (self.n,):
            raise ValueError(f"need one command and one load deviation per area ({self.n})")
        s = state.vector()
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(commands)) and np.all(np.isfinite(loads))):
            raise ValueError("non-finite grid state or input")
        s = self.Ad @ s + self.Bd @ np.concatenate([commands, loads])
        n = self.n
        return GridState(s[:n], s[n:2 * n], s[2 * n:], commands.copy(), state.t + 1)

    def closed_loop_matrix(self) -> np.ndarray:
        """Noise-free closed loop over [plant state, AGC integrator]."""
        n, ns = self.n, self.Ad.shape[0]
        # ACE as a linear map of the plant state (estimator is exact without noise)
        C = np.zeros((n, ns))
        C[:, :n] = np.diag(self.ace_b)
        C[:, 2 * n:] = self.ace_a[:, None] * (self.incidence @ self.flow_map)
        kdt = np.diag(self.agc_gain * self.config.slot_seconds)
        Bc = self.Bd[:, :n]
        # z' = z - K dt ACE(s); the new command is applied during the same slot
        top = np.hstack([self.Ad - Bc @ kdt @ C, Bc])
        bottom = np.hstack([-kdt @ C, np.eye(n)])
        return np.vstack([top, bottom])

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.closed_loop_matrix()))))


def step(state: GridState, commands, loads, config: GridConfig | None = None) -> GridState:
    return GridModel(config).step(state, commands, loads)


@dataclass
class Trace:
    dw: np.ndarray            # (L, areas) Hz
    dpe: np.ndarray           # (L, areas) estimated export deviation, pu
    ace: np.ndarray           # (L, areas)
    attack_kind: str = "none"
    active: np.ndarray = None  # (L,) bool
    meta: dict = field(default_factory=dict)
    slot_seconds: float = 4.0

    def __post_init__(self):
        if self.active is None:
            self.active = np.zeros(len(self.ace), dtype=bool)
        self.active = np.asarray(self.active, dtype=bool)

    @property
    def length(self) -> int:
        return len(self.ace)

    @property
    def area_count(self) -> int:
        return self.ace.shape[1]

    def unsafe_slots(self, band: float = SAFE_BAND_HZ) -> np.ndarray:
        """Slots where any area's frequency deviation leaves [-band, band] Hz."""
        return np.flatnonzero(np.any(np.abs(self.dw) > band, axis=1))


def simulate_trace(config: GridConfig | None, seed: int, attack_spec=None, model: GridModel | None = None) -> Trace:
    """Run one trace.  Noise and attack randomness use separate streams so that
    dropping or disabling the attack leaves the load/measurement noise identical."""
    model = model or GridModel(config)
    cfg = model.config
    rho = model.spectral_radius()
    if rho >= 1.0:
        raise UnstableConfigError(f"closed-loop spectral radius {rho:.4f} >= 1")

    n, L = cfg.area_count, cfg.trace_length
    noise_rng = np.random.default_rng([seed, 0])
    attack_rng = np.random.default_rng([seed, 1])
    est = model.estimator

    start = None
    injections = None
    buffer = None
    if attack_spec is not None:
        start = attacks.schedule(attack_spec, L, attack_rng)
        if attack_spec.kind == attacks.FDIA:
            injections = attacks.craft_fdia(attack_spec, est, cfg.tie_lines)
        else:
            buffer = attacks.CommandBuffer(attack_spec, start)

    total = cfg.burn_in + L
    loads_innov = noise_rng.normal(0.0, cfg.load_std, size=(total, n))
    meas_noise = noise_rng.normal(0.0, cfg.meas_noise_std, size=(total, est.n_measurements))

    dw = np.empty((L, n))
    dpe = np.empty((L, n))
    ace = np.empty((L, n))
    active = np.zeros(L, dtype=bool)
    alarms = 0

    state = GridState.zero(n)
    load = np.zeros(n)
    integ = np.zeros(n)
    kdt = model.agc_gain * cfg.slot_seconds
    for k in range(total):
        t = k - cfg.burn_in
        y = est.M @ model.flows(state) + meas_noise[k]
        attacked = start is not None and t >= 0 and start <= t < start + attack_spec.duration
        if attacked and injections is not None:
            y = y + injections[t - start]
        x_hat, _, residual = estimate_state(est, y)
        alarms += bdd_check(residual, est.bdd_threshold) if t >= 0 else 0
        pe = model.incidence @ x_hat
        e = compute_ace(state.dw, pe, cfg.areas)
        integ = integ - kdt * e
        delivered = integ.copy()
        if buffer is not None and t >= 0:
            area = attack_spec.target_area - 1
            delivered[area] = buffer.deliver(t, integ[area])
        if t >= 0:
            dw[t], dpe[t], ace[t] = state.dw, pe, e
            active[t] = attacked
        load = cfg.load_persistence * load + loads_innov[k]
        state = model.step(state, delivered, load)

    meta = {
        "seed": int(seed),
        "config_hash": cfg.hash(),
        "attack": attack_spec.to_dict() if attack_spec is not None else None,
        "attack_start": start,
        "bdd_alarms": int(alarms),
    }
    kind = attack_spec.kind if attack_spec is not None else "none"
    if kind == attacks.TDA and attack_spec.tau == 0:
        active[:] = False
        kind = "none"
    return Trace(dw, dpe, ace, kind, active, meta, cfg.slot_seconds)


# ----------------------------------------------------------------- trace files

def trace_columns(area_count: int) -> list[str]:
    cols = ["slot"]
    for i in range(1, area_count + 1):
        cols += [f"dw_{i}", f"dpe_{i}", f"ace_{i}"]
    return cols + ["attack_kind", "attack_active"]


def write_trace(trace: Trace, path) -> None:
    path = Path(path)
    n = trace.area_count
    code = KIND_CODES[trace.attack_kind]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(trace_columns(n))
        for t in range(trace.length):
            row = [t]
            for i in range(n):
                row += [repr(float(trace.dw[t, i])), repr(float(trace.dpe[t, i])), repr(float(trace.ace[t, i]))]
            w.writerow(row + [code, int(trace.active[t])])
    path.with_suffix(".json").write_text(json.dumps(trace.meta, sort_keys=True, indent=1) + "\n")


def read_trace(path) -> Trace:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    n = (len(header) - 3) // 3
    if header != trace_columns(n):
        raise ValueError(f"{path}: unexpected trace header")
    vals = body[:, 1:1 + 3 * n].reshape(len(body), n, 3)
    code = int(body[0, -2]) if len(body) else 0
    kind = {v: k for k, v in KIND_CODES.items()}[code]
    meta_path = path.with_suffix(".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return Trace(vals[:, :, 0].copy(), vals[:, :, 1].copy(), vals[:, :, 2].copy(), kind,
                 body[:, -1].astype(bool), meta)


CORPUS_KINDS = ("none", attacks.FDIA, attacks.TDA)


def trace_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def simulate_corpus(config: GridConfig | None, counts: dict[str, int], seed: int = 0, attack_options: dict | None = None) -> list[Trace]:
    """Traces for each kind in ``counts`` ({"none": n, "fdia": n, "tda": n}),
    ordered by kind then index.  Each trace has its own derived seed."""
    model = GridModel(config)
    opts = attack_options or {}
    unknown = set(counts) - set(CORPUS_KINDS)
    if unknown:
        raise ValueError(f"unknown trace kinds {sorted(unknown)}")
    traces = []
    index = 0
    for kind in CORPUS_KINDS:
        for _ in range(counts.get(kind, 0)):
            s = trace_seed(seed, index)
            spec = None
            if kind != "none":
                spec = attacks.sample_attack(kind, np.random.default_rng([s, 2]), **opts)
            traces.append(simulate_trace(None, s, spec, model))
            index += 1
    return traces

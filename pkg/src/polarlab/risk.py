"""Exact backdoor and conditional-adversarial risks on enumerable lattice instances.

Inputs live on the ``G x G`` lattice ``{0..G-1}^2`` scaled to ``[0, 1]^2``.
Classifiers are total lookup tables over the lattice, so both risks are
computed by brute-force enumeration of every admissible perturbation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

MAX_BALL = 10_000

HOLDS = "holds"
FAILS = "fails"
PREMISE_VIOLATED = "premise violated"


class BallTooLarge(ValueError):
    """The perturbation ball has more lattice offsets than the enumeration cap."""


def parse_norm(p):
    if isinstance(p, str):
        p = p.strip().lower()
        if p in ("inf", "linf", "infinity"):
            return np.inf
        p = float(p)
    p = float(p)
    if p != np.inf and p < 1:
        raise ValueError(f"norm order must be >= 1 or inf, got {p}")
    return p


def lattice_norm(offsets, grid, p):
    """Norm of integer lattice offsets ``(..., 2)`` measured in ``[0, 1]^2`` units."""
    v = np.abs(np.asarray(offsets, dtype=np.float64)) / (grid - 1)
    if p == np.inf:
        return v.max(axis=-1)
    return (v ** p).sum(axis=-1) ** (1.0 / p)


@dataclass
class FiniteInstance:
    grid: int
    labels: np.ndarray  # (G, G) true class of every lattice point
    trigger: np.ndarray  # (G, G, 2) lattice coordinates of x_delta for every x
    target: int
    h_bd: np.ndarray  # (G, G) backdoored classifier
    rho: float
    num_classes: int
    p: float = 2.0
    domain: np.ndarray = None  # (G, G) bool, which lattice points form the dataset
    fully_backdoored: bool = True
    max_ball: int = MAX_BALL

    def __post_init__(self):
        g = self.grid
        if g < 2:
            raise ValueError("lattice needs at least 2 points per axis")
        self.p = parse_norm(self.p)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.h_bd = np.asarray(self.h_bd, dtype=np.int64)
        self.trigger = np.asarray(self.trigger, dtype=np.int64)
        if self.domain is None:
            self.domain = np.ones((g, g), bool)
        self.domain = np.asarray(self.domain, dtype=bool)
        if self.labels.shape != (g, g) or self.h_bd.shape != (g, g) or self.domain.shape != (g, g):
            raise ValueError("labels, h_bd and domain must be G x G lookup tables")
        if self.trigger.shape != (g, g, 2):
            raise ValueError("trigger map must have shape (G, G, 2)")
        if self.trigger.min() < 0 or self.trigger.max() >= g:
            raise ValueError("trigger map leaves the lattice")
        check_classifier(self.labels, self.num_classes)
        check_classifier(self.h_bd, self.num_classes)
        if not 0 <= self.target < self.num_classes:
            raise ValueError("target outside [0, C)")
        if self.rho < 0:
            raise ValueError("budget must be non-negative")
        if self.fully_backdoored and not self.is_fully_backdoored():
            raise ValueError("h_bd does not send every triggered non-target point to the target")

    def dataset(self):
        """Coordinates ``(n, 2)`` of the non-target dataset."""
        mask = self.domain & (self.labels != self.target)
        return np.argwhere(mask)

    def triggered(self, pts):
        return self.trigger[pts[:, 0], pts[:, 1]]

    def is_fully_backdoored(self):
        pts = self.dataset()
        tp = self.triggered(pts)
        return bool(np.all(self.h_bd[tp[:, 0], tp[:, 1]] == self.target))

    def trigger_within_budget(self):
        pts = self.dataset()
        dist = lattice_norm(self.triggered(pts) - pts, self.grid, self.p)
        return bool(np.all(dist <= self.rho * (1 + 1e-12)))


def check_classifier(h, num_classes):
    if h.size and (h.min() < 0 or h.max() >= num_classes):
        raise ValueError("classifier output outside [0, C)")


def ball_offsets(grid, rho, p, cap=MAX_BALL):
    """All integer offsets whose scaled ``p``-norm is at most ``rho``."""
    r = grid - 1
    a = np.arange(-r, r + 1)
    cand = np.stack(np.meshgrid(a, a, indexing="ij"), axis=-1).reshape(-1, 2)
    keep = cand[lattice_norm(cand, grid, p) <= rho * (1 + 1e-12)]
    if len(keep) > cap:
        raise BallTooLarge(f"rho-ball holds {len(keep)} offsets, cap is {cap}")
    return keep


def backdoor_risk(inst, h):
    """Fraction of non-target points whose triggered version ``h`` sends to the target."""
    h = np.asarray(h)
    pts = inst.dataset()
    if len(pts) == 0:
        raise ValueError("empty non-target dataset")
    tp = inst.triggered(pts)
    return float(np.mean(h[tp[:, 0], tp[:, 1]] == inst.target))


def reachable(h, offsets, num_classes):
    """``out[c, i, j]`` is True when some offset keeps ``(i, j)`` on the lattice with ``h == c``."""
    g = h.shape[0]
    out = np.zeros((num_classes, g, g), bool)
    ii, jj = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
    for di, dj in offsets:
        si, sj = ii + di, jj + dj
        ok = (si >= 0) & (si < g) & (sj >= 0) & (sj < g)
        out[h[si[ok], sj[ok]], ii[ok], jj[ok]] = True
    return out


def cnpd_risk(inst, h):
    """Conditional adversarial risk: for each x, whether some t != y that the
    backdoored model assigns to x_delta is reachable by ``h`` within the ball."""
    h = np.asarray(h, dtype=np.int64)
    check_classifier(h, inst.num_classes)
    pts = inst.dataset()
    if len(pts) == 0:
        raise ValueError("empty non-target dataset")
    reach = reachable(h, ball_offsets(inst.grid, inst.rho, inst.p, inst.max_ball),
                      inst.num_classes)
    tp = inst.triggered(pts)
    t = inst.h_bd[tp[:, 0], tp[:, 1]]
    y = inst.labels[pts[:, 0], pts[:, 1]]
    hit = (t != y) & reach[t, pts[:, 0], pts[:, 1]]
    return float(np.mean(hit))


@dataclass
class Theorem2Verdict:
    verdict: str
    r_bd: float
    r_cnpd: float
    holds: bool | None
    fully_backdoored: bool
    trigger_within_budget: bool

    def to_dict(self):
        return asdict(self)


def check_theorem2(inst, h):
    """Check ``R_bd(h) <= R_cnpd(h)``; only asserted when both premises hold."""
    fully = inst.is_fully_backdoored()
    within = inst.trigger_within_budget()
    r_bd = backdoor_risk(inst, h)
    r_cnpd = cnpd_risk(inst, h)
    if not (fully and within):
        return Theorem2Verdict(PREMISE_VIOLATED, r_bd, r_cnpd, None, fully, within)
    ok = r_bd <= r_cnpd
    return Theorem2Verdict(HOLDS if ok else FAILS, r_bd, r_cnpd, ok, fully, within)


# seeded instance family ----------------------------------------------------

def _voronoi(rng, grid, num_classes):
    centers = rng.uniform(0, grid - 1, size=(num_classes, 2))
    ii, jj = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    d = (ii[..., None] - centers[:, 0]) ** 2 + (jj[..., None] - centers[:, 1]) ** 2
    return d.argmin(axis=-1)


@dataclass
class InstanceFamily:
    grid: int = 12
    classes: tuple = (2, 3, 4)
    p: float = 2.0
    max_shift: int = 3
    slack: tuple = (1.0, 1.5)
    meta: dict = field(default_factory=dict)


def random_instance(seed, premises=True, family=None):
    """Seeded ``(instance, h)`` pair.

    The trigger shifts every point by a fixed lattice vector (clamped at the
    border) and ``h_bd`` sends every triggered non-target point to ``T``. With
    ``premises=False`` the budget is set below the trigger distance so the
    budget premise fails. ``h`` is a perturbed copy of the clean labelling
    that keeps the backdoor on a random fraction of triggered points.
    """
    fam = family or InstanceFamily()
    rng = np.random.default_rng(seed)
    g = fam.grid
    c = int(rng.choice(fam.classes))
    p = parse_norm(fam.p)
    labels = _voronoi(rng, g, c)
    target = int(rng.integers(c))
    shift = np.zeros(2, np.int64)
    while not shift.any():
        shift = rng.integers(-fam.max_shift, fam.max_shift + 1, size=2)
    ii, jj = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
    trig = np.stack([np.clip(ii + shift[0], 0, g - 1), np.clip(jj + shift[1], 0, g - 1)], -1)
    h_bd = labels.copy()
    mask = labels != target
    h_bd[trig[mask][:, 0], trig[mask][:, 1]] = target
    full = float(lattice_norm(shift, g, p))
    if premises:
        rho = full * rng.uniform(*fam.slack)
    else:
        rho = full * rng.uniform(0.2, 0.8)
    inst = FiniteInstance(g, labels, trig, target, h_bd, rho, c, p)
    h = _voronoi(rng, g, c) if rng.random() < 0.3 else labels.copy()
    keep = rng.random((g, g)) < rng.uniform(0.0, 1.0)
    sel = mask & keep
    h[trig[sel][:, 0], trig[sel][:, 1]] = target
    return inst, h


def theorem2_sweep(n=100, seed=0, premises=True, family=None):
    """Verdicts for ``n`` seeded instances; seeds are ``seed, seed+1, ...``."""
    return [check_theorem2(*random_instance(seed + i, premises, family)) for i in range(n)]


def summarize(verdicts):
    counts = {HOLDS: 0, FAILS: 0, PREMISE_VIOLATED: 0}
    for v in verdicts:
        counts[v.verdict] += 1
    return {"instances": len(verdicts), "holds": counts[HOLDS], "fails": counts[FAILS],
            "premise_violated": counts[PREMISE_VIOLATED]}

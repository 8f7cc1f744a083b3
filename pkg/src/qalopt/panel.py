"""Landmark panel data model and quality-adjusted lifetime bookkeeping.

A panel stores, for every subject, covariates, treatment and quality scores
at a common set of landmark times, plus a continuous event time and a
censoring time.  Entries after a subject leaves the risk set are NaN.

Everything that depends on a target quality-adjusted time ``x`` (the time
needed to accumulate ``x``, the induced censoring indicator, the last
landmark at risk) is derived here, both for a single trajectory and
vectorized over a whole panel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

INTERCEPT = "intercept"


class InvariantViolation(ValueError):
    """Raised when data break a structural invariant of the panel."""


@dataclass(frozen=True)
class Landmarks:
    """Monitoring times ``0 = l_0 < l_1 < ... < l_K <= tau``."""

    times: np.ndarray
    tau: float = np.inf

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if times.ndim != 1 or times.size < 1:
            raise InvariantViolation("landmark times must be a non-empty 1-d sequence")
        if times[0] != 0.0:
            raise InvariantViolation("first landmark must be 0")
        if np.any(np.diff(times) <= 0):
            raise InvariantViolation("landmark times must be strictly increasing")
        if times[-1] > self.tau:
            raise InvariantViolation("last landmark exceeds tau")
        times.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "tau", float(self.tau))

    @classmethod
    def regular(cls, K: int, gap: float, tau: float = np.inf) -> "Landmarks":
        return cls(np.arange(K + 1) * float(gap), tau)

    @property
    def K(self) -> int:
        return self.times.size - 1

    @property
    def gap(self) -> float | None:
        """Common spacing, or None for irregular landmarks."""
        if self.K == 0:
            return None
        d = np.diff(self.times)
        return float(d[0]) if np.allclose(d, d[0]) else None

    @property
    def segment_ends(self) -> np.ndarray:
        """Right ends of the K+1 quality segments; the last one is tau."""
        return np.append(self.times[1:], self.tau)

    def __eq__(self, other):
        if not isinstance(other, Landmarks):
            return NotImplemented
        return self.tau == other.tau and np.array_equal(self.times, other.times)

    def __hash__(self):
        return hash((self.times.tobytes(), self.tau))


@dataclass(frozen=True)
class SubjectTrajectory:
    """One subject's landmark-indexed record.

    ``z`` has shape (K+1, d); ``a``, ``y`` and ``q`` have shape (K+1,).
    Values after exit are NaN (``y`` is always 0/1).
    """

    id: object
    z: np.ndarray
    a: np.ndarray
    y: np.ndarray
    q: np.ndarray
    event_time: float
    censor_time: float = np.inf
    covariate_names: tuple[str, ...] = ()

    @property
    def observed_time(self) -> float:
        return min(self.event_time, self.censor_time)

    @property
    def event_observed(self) -> int:
        return int(self.event_time < self.censor_time)

    def covariates(self, names: Sequence[str]) -> np.ndarray:
        """Covariate matrix (K+1, len(names)); ``"intercept"`` gives ones."""
        cols = []
        for name in names:
            if name == INTERCEPT:
                cols.append(np.ones(self.a.shape[0]))
            else:
                cols.append(self.z[:, self.covariate_names.index(name)])
        return np.column_stack(cols) if cols else np.empty((self.a.shape[0], 0))


@dataclass(frozen=True)
class TargetDerived:
    """Quantities induced by a target quality-adjusted time ``x``."""

    x: float
    U: float
    s_star: float
    T_x: float
    tilde_T_x: float
    delta_c: int
    l_x: int
    c_j: np.ndarray


def _check_quality(q: np.ndarray) -> None:
    qs = q[~np.isnan(q)]
    if np.any((qs < 0) | (qs > 1)):
        raise InvariantViolation("quality score outside [0, 1]")


def _cumulative_quality_at(q: np.ndarray, landmarks: Landmarks, horizon: float, s: float) -> float:
    """Integral of quality over [0, min(s, horizon)); NaN if it needs an absent score."""
    upto = min(s, horizon)
    total = 0.0
    for j, (start, end) in enumerate(zip(landmarks.times, landmarks.segment_ends)):
        length = min(end, upto) - start
        if length <= 0:
            break
        if np.isnan(q[j]):
            return np.nan
        total += q[j] * length
    return total


def compute_qal(traj: SubjectTrajectory, landmarks: Landmarks, upto: float | None = None) -> float:
    """Quality-adjusted lifetime accumulated on [0, T), or on [0, upto) if given.

    Raises InvariantViolation for scores outside [0, 1] and ValueError when a
    segment inside the horizon has no recorded score.
    """
    _check_quality(traj.q)
    horizon = traj.event_time if upto is None else min(upto, traj.event_time)
    if not np.isfinite(horizon) and not np.isfinite(landmarks.tau):
        raise ValueError("quality-adjusted lifetime is unbounded: infinite horizon")
    value = _cumulative_quality_at(traj.q, landmarks, horizon, np.inf)
    if np.isnan(value):
        raise ValueError(f"subject {traj.id}: quality score missing inside [0, {horizon})")
    return value


def qal_inverse(traj: SubjectTrajectory, landmarks: Landmarks, x: float) -> float:
    """Smallest original time at which cumulative quality reaches ``x``.

    Returns inf when ``x`` is never reached, either because the subject dies
    first or because the quality record stops (censoring) before reaching it.
    """
    if x < 0:
        raise ValueError("target x must be nonnegative")
    _check_quality(traj.q)
    if x == 0:
        return 0.0
    total = 0.0
    for j, (start, end) in enumerate(zip(landmarks.times, landmarks.segment_ends)):
        end = min(end, traj.event_time)
        length = end - start
        if length <= 0 or np.isnan(traj.q[j]):
            break
        qj = traj.q[j]
        if qj > 0 and total + qj * length >= x:
            return float(start + (x - total) / qj)
        total += qj * length
    return np.inf


def derive_target(traj: SubjectTrajectory, landmarks: Landmarks, x: float) -> TargetDerived:
    """All target-``x`` quantities for one subject.

    ``U`` is the observed quality-adjusted lifetime, accumulated up to
    ``min(T, C)``; when ``delta_c`` is 1 it is enough to decide ``U > x``.
    """
    s_star = qal_inverse(traj, landmarks, x)
    T, C = traj.event_time, traj.censor_time
    T_x = min(T, s_star)
    tilde_T_x = min(T_x, C)
    delta_c = int(C > T_x)
    times = landmarks.times
    l_x = int(np.max(np.nonzero(tilde_T_x >= times)[0]))
    nxt = np.append(times[1:], np.inf)
    c_j = ((delta_c == 0) & (tilde_T_x < nxt)).astype(int)
    U = compute_qal(traj, landmarks, upto=min(T, C))
    return TargetDerived(float(x), U, s_star, T_x, tilde_T_x, delta_c, l_x, c_j)


@dataclass(frozen=True)
class Panel:
    """Columnar storage for n subjects observed at shared landmarks.

    Arrays: ``z`` (n, K+1, d), ``a`` and ``q`` (n, K+1), ``event_time`` and
    ``censor_time`` (n,).  The at-risk matrix ``y`` is derived from the
    observed times unless supplied (e.g. when read from a file).
    """

    landmarks: Landmarks
    ids: np.ndarray
    z: np.ndarray
    a: np.ndarray
    q: np.ndarray
    event_time: np.ndarray
    censor_time: np.ndarray
    covariate_names: tuple[str, ...]
    y: np.ndarray | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n, k1 = np.shape(self.a)
        if k1 != self.landmarks.K + 1:
            raise InvariantViolation("treatment matrix does not match landmark count")
        z = np.asarray(self.z, dtype=float)
        if z.ndim != 3 or z.shape[:2] != (n, k1) or z.shape[2] != len(self.covariate_names):
            raise InvariantViolation("covariate array must be (n, K+1, d) matching covariate_names")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float))
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))
        object.__setattr__(self, "event_time", np.asarray(self.event_time, dtype=float))
        object.__setattr__(self, "censor_time", np.asarray(self.censor_time, dtype=float))
        object.__setattr__(self, "ids", np.asarray(self.ids))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        if self.y is None:
            y = (self.observed_time[:, None] >= self.landmarks.times[None, :]).astype(np.int8)
            object.__setattr__(self, "y", y)
        else:
            object.__setattr__(self, "y", np.asarray(self.y, dtype=np.int8))

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def K(self) -> int:
        return self.landmarks.K

    @property
    def observed_time(self) -> np.ndarray:
        return np.minimum(self.event_time, self.censor_time)

    @property
    def event_observed(self) -> np.ndarray:
        return (self.event_time < self.censor_time).astype(np.int8)

    def covariate(self, name: str) -> np.ndarray:
        if name == INTERCEPT:
            return np.ones(self.a.shape)
        try:
            return self.z[:, :, self.covariate_names.index(name)]
        except ValueError:
            raise KeyError(f"unknown covariate {name!r}; have {self.covariate_names}") from None

    def covariates(self, names: Sequence[str]) -> np.ndarray:
        """Stack of named covariates, shape (n, K+1, len(names))."""
        if not names:
            return np.empty(self.a.shape + (0,))
        return np.stack([self.covariate(nm) for nm in names], axis=-1)

    def subject(self, i: int) -> SubjectTrajectory:
        return SubjectTrajectory(
            id=self.ids[i].item() if hasattr(self.ids[i], "item") else self.ids[i],
            z=self.z[i], a=self.a[i], y=self.y[i], q=self.q[i],
            event_time=float(self.event_time[i]), censor_time=float(self.censor_time[i]),
            covariate_names=self.covariate_names,
        )

    @property
    def subjects(self) -> list[SubjectTrajectory]:
        return [self.subject(i) for i in range(self.n)]

    def __iter__(self) -> Iterator[SubjectTrajectory]:
        return (self.subject(i) for i in range(self.n))

    def __len__(self) -> int:
        return self.n

    def take(self, index) -> "Panel":
        """Sub-panel (rows may repeat, as in a bootstrap resample)."""
        index = np.asarray(index)
        return Panel(self.landmarks, self.ids[index], self.z[index], self.a[index], self.q[index],
                     self.event_time[index], self.censor_time[index], self.covariate_names,
                     self.y[index], dict(self.meta))

    @classmethod
    def from_subjects(cls, subjects: Sequence[SubjectTrajectory], landmarks: Landmarks,
                      covariate_names: Sequence[str]) -> "Panel":
        return cls(
            landmarks,
            np.array([s.id for s in subjects]),
            np.stack([np.asarray(s.z, dtype=float).reshape(landmarks.K + 1, -1) for s in subjects]),
            np.stack([s.a for s in subjects]),
            np.stack([s.q for s in subjects]),
            np.array([s.event_time for s in subjects], dtype=float),
            np.array([s.censor_time for s in subjects], dtype=float),
            tuple(covariate_names),
            np.stack([s.y for s in subjects]),
        )


# ---------------------------------------------------------------------------
# vectorized quality bookkeeping


def segment_lengths(panel: Panel, upto: np.ndarray) -> np.ndarray:
    """Length of each quality segment inside [0, upto_i), shape (n, K+1)."""
    lm = panel.landmarks
    ends = np.minimum(lm.segment_ends[None, :], np.asarray(upto, dtype=float)[:, None])
    return np.clip(ends - lm.times[None, :], 0.0, None)


def observed_qal(panel: Panel) -> np.ndarray:
    """Quality-adjusted lifetime accumulated up to min(T, C) for every subject."""
    lengths = segment_lengths(panel, panel.observed_time)
    need = lengths > 0
    if np.any(np.isnan(panel.q) & need):
        i = int(np.nonzero((np.isnan(panel.q) & need).any(1))[0][0])
        raise ValueError(f"subject {panel.ids[i]}: quality score missing while at risk")
    return np.where(need, np.nan_to_num(panel.q) * lengths, 0.0).sum(1)


def landmark_qal(panel: Panel) -> np.ndarray:
    """Cumulative quality at each landmark, shape (n, K+1); NaN past exit."""
    times = panel.landmarks.times
    lengths = np.diff(times)[None, :] * np.ones((panel.n, 1))
    contrib = np.nan_to_num(panel.q[:, :-1]) * lengths
    out = np.concatenate([np.zeros((panel.n, 1)), np.cumsum(contrib, axis=1)], axis=1)
    return np.where(panel.y.astype(bool), out, np.nan)


@dataclass(frozen=True)
class PanelTargets:
    """Vectorized ``TargetDerived`` for all subjects at one ``x``."""

    x: float
    U: np.ndarray
    s_star: np.ndarray
    T_x: np.ndarray
    tilde_T_x: np.ndarray
    delta_c: np.ndarray
    l_x: np.ndarray


def derive_targets(panel: Panel, x: float, U: np.ndarray | None = None) -> PanelTargets:
    """Per-subject target quantities at ``x``, computed directly from definitions."""
    if x < 0:
        raise ValueError("target x must be nonnegative")
    lm = panel.landmarks
    n, k1 = panel.a.shape
    if U is None:
        U = observed_qal(panel)
    starts = lm.times[None, :]
    ends = np.minimum(lm.segment_ends[None, :], panel.event_time[:, None])
    lengths = np.clip(ends - starts, 0.0, None)
    # only segments with a recorded score count; cumulative stops at the first gap
    known = ~np.isnan(panel.q)
    known = np.cumprod(known | (lengths == 0), axis=1).astype(bool) & (lengths > 0)
    q = np.where(known, panel.q, 0.0)
    seg = np.where(q > 0, q * lengths, 0.0)
    before = np.concatenate([np.zeros((n, 1)), np.cumsum(seg, axis=1)[:, :-1]], axis=1)
    reach = known & (q > 0) & (before + seg >= x)
    if x == 0:
        s_star = np.zeros(n)
    else:
        first = np.where(reach.any(1), reach.argmax(1), -1)
        rows = np.arange(n)
        j = np.clip(first, 0, k1 - 1)
        # rows that never reach x are masked below; their candidates may overflow
        with np.errstate(over="ignore"):
            cand = lm.times[j] + (x - before[rows, j]) / np.where(q[rows, j] > 0, q[rows, j], 1.0)
        s_star = np.where(first >= 0, cand, np.inf)
    T_x = np.minimum(panel.event_time, s_star)
    tilde = np.minimum(T_x, panel.censor_time)
    delta_c = (panel.censor_time > T_x).astype(np.int8)
    l_x = (tilde[:, None] >= lm.times[None, :]).sum(1) - 1
    return PanelTargets(float(x), U, s_star, T_x, tilde, delta_c, l_x.astype(int))


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    subject_id: object
    j: int | None
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation]
    n_subjects: int

    @property
    def ok(self) -> bool:
        return not self.violations

    def summary(self) -> str:
        if self.ok:
            return f"{self.n_subjects} subjects, no violations"
        lines = [f"{self.n_subjects} subjects, {len(self.violations)} violations"]
        lines += [f"  subject {v.subject_id} j={v.j}: {v.message}" for v in self.violations[:50]]
        return "\n".join(lines)


def validate_panel(panel: Panel) -> ValidationReport:
    """Check every structural invariant; violations are returned, never raised."""
    out: list[Violation] = []
    times = panel.landmarks.times
    expect_y = (panel.observed_time[:, None] >= times[None, :]).astype(np.int8)
    for i in range(panel.n):
        sid = panel.ids[i].item() if hasattr(panel.ids[i], "item") else panel.ids[i]
        T, C = panel.event_time[i], panel.censor_time[i]
        a, y, q, z = panel.a[i], panel.y[i], panel.q[i], panel.z[i]

        def add(j, msg):
            out.append(Violation(sid, j, msg))

        if not T > 0:
            add(None, "event time must be positive")
        if not C > 0:
            add(None, "censoring time must be positive")
        if y[0] != 1:
            add(0, "at-risk indicator at baseline must be 1")
        for j in range(1, y.size):
            if y[j] > y[j - 1]:
                add(j, "non-monotone at-risk indicator")
        for j in np.nonzero(y != expect_y[i])[0]:
            add(int(j), "at-risk indicator inconsistent with observed time")
        at_risk = y.astype(bool)
        if at_risk[0] and a[0] != 0:
            add(0, "treatment at baseline must be 0")
        prev = 0.0
        for j in np.nonzero(at_risk)[0]:
            if np.isnan(a[j]):
                add(int(j), "missing treatment while at risk")
                continue
            if a[j] not in (0.0, 1.0):
                add(int(j), "treatment not binary")
            elif a[j] < prev:
                add(int(j), "non-monotone treatment")
            prev = a[j]
            if np.isnan(q[j]):
                add(int(j), "missing quality score while at risk")
            elif not 0 <= q[j] <= 1:
                add(int(j), "quality score outside [0, 1]")
            elif times[j] >= T and q[j] != 0:
                add(int(j), "quality after absorbing state")
            if np.any(np.isnan(z[j])):
                add(int(j), "missing covariate while at risk")
        for j in np.nonzero(~at_risk)[0]:
            if not (np.isnan(a[j]) and np.isnan(q[j]) and np.all(np.isnan(z[j]))):
                add(int(j), "value recorded after exit")
    return ValidationReport(out, panel.n)

"""Discrete-event penalty simulator for SBPP networks.

Every link is an alternating renewal process (exponential up, Pareto down).
After each batch of simultaneous events the SLA states are re-resolved:
revertive switch-back to the working path, then first-come allocation of
shared backup capacity in ascending SLA id order, no preemption. While an
SLA is down it accrues ``demand * penalty_rate`` per hour.

Years are simulated in fixed-size blocks, each an independent replica
seeded from ``(seed, block index)``, so the output does not depend on the
number of worker processes.
"""

import csv
import heapq
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from risknet.errors import DataError, ParameterError
from risknet.reliability import HOURS_PER_YEAR, downtime_from_uniform, uptime_from_uniform
from risknet.rng import stream

ON_WORKING = 0
ON_BACKUP = 1
DOWN = 2

REPAIR = 0
FAIL = 1

DEFAULT_BLOCK_YEARS = 10
CAPACITY_TOL = 1e-9


@dataclass
class PenaltyTable:
    """Dense ``penalties[year, sla]`` matrix plus per-link downtime diagnostics."""

    penalties: np.ndarray
    link_down_hours: np.ndarray = None

    @property
    def years(self):
        return self.penalties.shape[0]

    @property
    def n_slas(self):
        return self.penalties.shape[1]

    def __eq__(self, other):
        if not isinstance(other, PenaltyTable):
            return NotImplemented
        return np.array_equal(self.penalties, other.penalties)

    def to_csv(self, dense=False):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["year", "sla_id", "penalty"])
        rows = 0
        for y in range(self.years):
            for k in range(self.n_slas):
                value = self.penalties[y, k]
                if dense or value != 0.0:
                    writer.writerow([y, k, repr(float(value))])
                    rows += 1
        buf.write(f"# rows={rows} years={self.years} slas={self.n_slas}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        lines = text.strip().splitlines()
        if not lines or lines[0].strip() != "year,sla_id,penalty":
            raise DataError("penalty CSV must start with header 'year,sla_id,penalty'")
        footer = lines[-1]
        if not footer.startswith("#"):
            raise DataError("penalty CSV is missing its footer row")
        try:
            info = dict(item.split("=") for item in footer[1:].split())
            rows, years, slas = int(info["rows"]), int(info["years"]), int(info["slas"])
        except (KeyError, ValueError):
            raise DataError(f"bad penalty CSV footer {footer!r}") from None
        body = lines[1:-1]
        if len(body) != rows:
            raise DataError(f"footer says {rows} rows, found {len(body)}")
        penalties = np.zeros((years, slas))
        for lineno, row in enumerate(csv.reader(body), start=2):
            try:
                y, k, value = int(row[0]), int(row[1]), float(row[2])
            except (IndexError, ValueError):
                raise DataError(f"line {lineno}: cannot parse {row!r}") from None
            if not (0 <= y < years and 0 <= k < slas) or not value >= 0:
                raise DataError(f"line {lineno}: entry out of range")
            penalties[y, k] = value
        return cls(penalties)


def accrue(penalties, start, end, rate, year_hours=HOURS_PER_YEAR):
    """Add ``rate * (end - start)`` to ``penalties[:, sla]`` split at year boundaries.

    ``penalties`` is a 1-D view for a single SLA; times in hours.
    """
    if end <= start:
        return
    y = int(start // year_hours)
    last = penalties.shape[0] - 1
    t = start
    while t < end and y <= last:
        boundary = (y + 1) * year_hours
        seg_end = min(end, boundary)
        penalties[y] += rate * (seg_end - t)
        t = seg_end
        y += 1


def penalty_accounting(intervals, years, n_slas):
    """Penalty table from ``(sla, start_h, end_h, rate)`` down intervals."""
    table = np.zeros((years, n_slas))
    for sla, start, end, rate in intervals:
        accrue(table[:, sla], start, end, rate)
    return PenaltyTable(table)


class SimState:
    """Link states, backup allocations and SLA protection states of one replica."""

    def __init__(self, scenario, check=False):
        topo = scenario.topology
        self.scenario = scenario
        self.check = check
        n_links, n_slas = topo.n_links, scenario.n_slas
        self.capacity = np.array([link.backup_capacity for link in topo.links])
        self.allocation = np.zeros(n_links)
        self.up = np.ones(n_links, dtype=bool)
        self.state = np.full(n_slas, ON_WORKING, dtype=np.int8)
        self.down_since = np.zeros(n_slas)
        self.demand = scenario.demands
        self.working_down = np.zeros(n_slas, dtype=np.int64)
        self.backup_down = np.zeros(n_slas, dtype=np.int64)
        self.on_working_of = [[] for _ in range(n_links)]
        self.on_backup_of = [[] for _ in range(n_links)]
        for sla in scenario.slas:
            for lid in sla.working:
                self.on_working_of[lid].append(sla.id)
            for lid in sla.backup:
                self.on_backup_of[lid].append(sla.id)
        self.not_working = set()
        self.intervals = []
        self._touched = set()

    def fail(self, lid):
        if not self.up[lid]:
            return
        self.up[lid] = False
        for k in self.on_working_of[lid]:
            self.working_down[k] += 1
        for k in self.on_backup_of[lid]:
            self.backup_down[k] += 1
        self._touched.update(self.on_working_of[lid])
        self._touched.update(self.on_backup_of[lid])

    def repair(self, lid):
        if self.up[lid]:
            return
        self.up[lid] = True
        for k in self.on_working_of[lid]:
            self.working_down[k] -= 1
        for k in self.on_backup_of[lid]:
            self.backup_down[k] -= 1
        self._touched.update(self.on_working_of[lid])
        self._touched.update(self.on_backup_of[lid])

    def _release(self, k):
        for lid in self.scenario.slas[k].backup:
            self.allocation[lid] -= self.demand[k]
            if self.allocation[lid] < 0.0:
                self.allocation[lid] = 0.0

    def _leave_down(self, k, t):
        if self.state[k] == DOWN:
            self.intervals.append(
                (k, self.down_since[k], t, self.demand[k] * self.scenario.penalty_rate)
            )

    def _try_backup(self, k):
        if self.backup_down[k]:
            return False
        need = self.demand[k]
        backup = self.scenario.slas[k].backup
        for lid in backup:
            residual = self.capacity[lid] - self.allocation[lid]
            if residual + CAPACITY_TOL * max(1.0, self.capacity[lid]) < need:
                return False
        for lid in backup:
            self.allocation[lid] += need
        return True

    def resolve(self, t):
        """Re-resolve SLA states after link changes at time ``t``."""
        touched = self._touched
        self._touched = set()
        # revert SLAs whose working path is whole again
        for k in sorted(touched):
            if self.working_down[k] == 0 and self.state[k] != ON_WORKING:
                if self.state[k] == ON_BACKUP:
                    self._release(k)
                else:
                    self._leave_down(k, t)
                self.state[k] = ON_WORKING
                self.not_working.discard(k)
        for k in sorted(touched):
            if self.state[k] == ON_WORKING and self.working_down[k] > 0:
                self.not_working.add(k)
            elif self.state[k] == ON_BACKUP and self.backup_down[k] > 0:
                self._release(k)
                self.state[k] = DOWN
                self.down_since[k] = t
                self.not_working.add(k)
        candidates = sorted(
            k for k in self.not_working if self.state[k] != ON_BACKUP
        )
        for k in candidates:
            was = self.state[k]
            if self._try_backup(k):
                if was == DOWN:
                    self._leave_down(k, t)
                self.state[k] = ON_BACKUP
            elif was != DOWN:
                self.state[k] = DOWN
                self.down_since[k] = t
        if self.check:
            self.assert_consistent()

    def close(self, t):
        for k in sorted(self.not_working):
            if self.state[k] == DOWN:
                self._leave_down(k, t)
                self.down_since[k] = t

    def assert_consistent(self):
        expected = np.zeros_like(self.allocation)
        for k in np.flatnonzero(self.state == ON_BACKUP):
            for lid in self.scenario.slas[k].backup:
                expected[lid] += self.demand[k]
        tol = CAPACITY_TOL * np.maximum(1.0, self.capacity)
        assert np.all(expected <= self.capacity + tol), "backup capacity exceeded"
        assert np.allclose(expected, self.allocation, atol=1e-9), "allocation bookkeeping drift"
        for k in np.flatnonzero(self.state == ON_BACKUP):
            assert self.backup_down[k] == 0, f"SLA {k} on a broken backup path"


def resolve_slas(state, scenario=None, t=0.0):
    """Functional wrapper: re-resolve ``state`` in place and return it."""
    state.resolve(t)
    return state


def _simulate_block(scenario, years, seed, block, check=False):
    horizon = years * HOURS_PER_YEAR
    n_links = scenario.topology.n_links
    rngs = [stream(seed, block, lid) for lid in range(n_links)]
    rel = scenario.reliability
    state = SimState(scenario, check=check)
    heap = []
    for lid in range(n_links):
        t = uptime_from_uniform(rel[lid], 1.0 - rngs[lid].random())
        heapq.heappush(heap, (t, FAIL, lid))
    link_down = np.zeros(n_links)
    fail_time = np.zeros(n_links)
    while heap and heap[0][0] < horizon:
        t = heap[0][0]
        while heap and heap[0][0] == t:
            _, kind, lid = heapq.heappop(heap)
            r = rngs[lid]
            if kind == FAIL:
                state.fail(lid)
                fail_time[lid] = t
                dt = downtime_from_uniform(rel[lid], 1.0 - r.random())
                heapq.heappush(heap, (t + dt, REPAIR, lid))
            else:
                state.repair(lid)
                link_down[lid] += t - fail_time[lid]
                dt = uptime_from_uniform(rel[lid], 1.0 - r.random())
                heapq.heappush(heap, (t + dt, FAIL, lid))
        state.resolve(t)
    state.close(horizon)
    for lid in np.flatnonzero(~state.up):
        link_down[lid] += horizon - fail_time[lid]
    table = penalty_accounting(state.intervals, years, scenario.n_slas)
    table.link_down_hours = link_down
    return table


def _run_block(args):
    return _simulate_block(*args)


def simulate(scenario, years, seed, block_years=DEFAULT_BLOCK_YEARS, workers=1, check=False):
    """Simulate ``years`` of operation; returns the per-year, per-SLA PenaltyTable."""
    if years < 1:
        raise ParameterError(f"years must be >= 1, got {years}")
    if block_years < 1:
        raise ParameterError("block_years must be >= 1")
    jobs = []
    start = 0
    block = 0
    while start < years:
        n = min(block_years, years - start)
        jobs.append((scenario, n, seed, block, check))
        start += n
        block += 1
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_block, jobs))
    else:
        parts = [_run_block(job) for job in jobs]
    table = PenaltyTable(
        np.concatenate([p.penalties for p in parts], axis=0),
        np.sum([p.link_down_hours for p in parts], axis=0),
    )
    return table


def simulate_schedule(scenario, outages, years, check=True):
    """Replay a fixed outage schedule of ``(link, fail_h, repair_h)`` triples.

    Used to check protection semantics on hand-built failure patterns.
    """
    events = []
    for lid, start, end in outages:
        if not 0 <= start <= end:
            raise ParameterError(f"bad outage interval ({start}, {end}) on link {lid}")
        events.append((start, FAIL, lid))
        events.append((end, REPAIR, lid))
    events.sort()
    horizon = years * HOURS_PER_YEAR
    state = SimState(scenario, check=check)
    i = 0
    while i < len(events) and events[i][0] < horizon:
        t = events[i][0]
        while i < len(events) and events[i][0] == t:
            _, kind, lid = events[i]
            if kind == FAIL:
                state.fail(lid)
            else:
                state.repair(lid)
            i += 1
        state.resolve(t)
    state.close(horizon)
    return penalty_accounting(state.intervals, years, scenario.n_slas)


def downtime_fraction(table, years=None):
    """Empirical per-link down fraction from a simulation's diagnostics."""
    years = table.years if years is None else years
    return table.link_down_hours / (years * HOURS_PER_YEAR)


def expected_total(table):
    return float(table.penalties.sum(axis=1).mean())


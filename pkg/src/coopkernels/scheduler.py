"""Cooperative scheduler: compute-unit bookkeeping, kill demands, fork grants.

The scheduler is a passive object driven by the simulator on a virtual clock.
It owns the unit table and one resource channel per cooperative kernel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from .errors import ConfigError, NotYetSatisfied, RejectedNoCapacity


@dataclass
class ResourceMessage:
    demand_kills: int = 0
    grant_forks: int = 0


# policies ------------------------------------------------------------------


@dataclass(frozen=True)
class NeverResize:
    """Never demands kills and never grants forks."""

    name = "never"


@dataclass(frozen=True)
class ScriptedTrace:
    """Timed (time, demand, grant) events applied to the cooperative kernel."""

    events: tuple = ()
    name = "scripted"

    def __post_init__(self):
        times = [e[0] for e in self.events]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ConfigError("scripted trace times must be strictly increasing")
        if any(e[1] < 0 or e[2] < 0 for e in self.events):
            raise ConfigError("scripted demands and grants must be non-negative")


@dataclass(frozen=True)
class TargetOccupancy:
    """Demand exactly what queued launches need; when nothing is queued,
    grant every free unit back to the cooperative kernel."""

    name = "target"


def make_policy(name: str, events=()):
    if name in ("never", "never-resize"):
        return NeverResize()
    if name in ("target", "target-occupancy"):
        return TargetOccupancy()
    if name in ("scripted", "scripted-trace"):
        return ScriptedTrace(tuple(events))
    raise ConfigError(f"unknown policy {name!r}")


# records ---------------------------------------------------------------------


@dataclass
class KernelEntry:
    kid: int
    name: str
    cooperative: bool
    N: int
    wg_units: list = field(default_factory=list)  # unit held by each active slot, in slot order
    queued_need: int = 0
    reserved: list = field(default_factory=list)
    status: str = "queued"
    request_id: Optional[int] = None

    @property
    def M(self):
        return len(self.wg_units)


@dataclass
class DemandRecord:
    rid: int
    kid: int
    posted: int
    amount: int
    surrendered: list = field(default_factory=list)
    for_launch: Optional[int] = None

    @property
    def satisfied(self):
        return len(self.surrendered) >= self.amount


@dataclass
class LaunchDecision:
    kid: int
    started: bool
    units: list
    demand_posted: int = 0
    request_id: Optional[int] = None


class SchedulerContext:
    def __init__(self, units: int, policy=None, oversubscribe: bool = False):
        if units < 1:
            raise ConfigError("need at least one compute unit")
        self.units = units
        self.policy = policy if policy is not None else NeverResize()
        self.unit_status: list = [None] * units  # None = Available, else kernel id
        self.channels: dict = {}
        self.kernels: dict = {}
        self.requests: dict = {}
        self._open: list = []  # unsatisfied demand ids in FIFO order
        self.queue: list = []  # queued launch ids
        self.outbox: list = []  # (kid, time) of launches started after queuing
        self.trace: list = []
        self._next_kid = 0
        self._next_rid = 0
        self._scripted = list(getattr(self.policy, "events", ()))
        self.oversubscribe = oversubscribe

    # helpers
    def _log(self, now, event, **kw):
        rec = {"t": now, "event": event}
        rec.update(kw)
        self.trace.append(rec)

    def available(self) -> list:
        return [u for u, s in enumerate(self.unit_status) if s is None]

    def counts(self):
        free = sum(1 for s in self.unit_status if s is None)
        return free, self.units - free

    def coop_kernel(self) -> Optional[KernelEntry]:
        for k in self.kernels.values():
            if k.cooperative and k.status == "running":
                return k
        return None

    def _new_request(self, kid, now, amount, for_launch=None):
        rid = self._next_rid
        self._next_rid += 1
        rec = DemandRecord(rid, kid, now, amount, for_launch=for_launch)
        self.requests[rid] = rec
        if amount > 0:
            self._open.append(rid)
        self._log(now, "demand", kernel=kid, request=rid, amount=amount)
        return rid

    # launch protocol
    def launch(self, spec, now: int, name: str = "", start_groups: Optional[int] = None) -> LaunchDecision:
        kid = self._next_kid
        self._next_kid += 1
        entry = KernelEntry(kid, name or spec.program.name, spec.cooperative, spec.groups)
        self.kernels[kid] = entry
        free = self.available()
        if spec.cooperative:
            want = spec.groups if start_groups is None else min(start_groups, spec.groups)
            if self.oversubscribe:
                n = want
                units = [free[i % len(free)] for i in range(n)] if free else []
            else:
                n = min(want, len(free))
                units = free[:n]
            if n < 1:
                raise RejectedNoCapacity("no free unit for a cooperative kernel")
            self.channels[kid] = ResourceMessage()
            self._start(entry, units, now)
            return LaunchDecision(kid, True, list(units))
        if len(free) >= spec.groups:
            self._start(entry, free[: spec.groups], now)
            return LaunchDecision(kid, True, list(free[: spec.groups]))
        coop = self.coop_kernel()
        need = spec.groups - len(free)
        if coop is None or isinstance(self.policy, NeverResize):
            raise RejectedNoCapacity(f"{spec.groups} units requested, {len(free)} free and nothing to reclaim")
        ch = self.channels[coop.kid]
        if ch.demand_kills + need > coop.M - 1:
            raise RejectedNoCapacity(
                f"cooperative kernel can yield at most {coop.M - 1 - ch.demand_kills} more units, {need} needed"
            )
        entry.queued_need = spec.groups
        entry.reserved = list(free)
        for u in free:
            self.unit_status[u] = kid
        self.queue.append(kid)
        ch.demand_kills += need
        ch.grant_forks = 0
        rid = self._new_request(coop.kid, now, need, for_launch=kid)
        entry.request_id = rid
        self._log(now, "queue", kernel=kid, need=need)
        return LaunchDecision(kid, False, list(free), need, rid)

    def _start(self, entry, units, now):
        entry.status = "running"
        entry.wg_units = list(units)
        for u in units:
            self.unit_status[u] = entry.kid
        self._log(now, "launch", kernel=entry.kid, name=entry.name, units=len(units))

    def finish(self, kid: int, now: int):
        """Kernel ``kid`` completed: release its units."""
        entry = self.kernels[kid]
        entry.status = "done"
        for u in set(entry.wg_units):
            if self.unit_status[u] == kid:
                self.unit_status[u] = None
        entry.wg_units = []
        self.channels.pop(kid, None)
        self._log(now, "finish", kernel=kid)
        self._after_release(now)

    def _after_release(self, now):
        # hand free units to queued launches first
        for qkid in list(self.queue):
            q = self.kernels[qkid]
            for u in self.available():
                if len(q.reserved) >= q.queued_need:
                    break
                self.unit_status[u] = qkid
                q.reserved.append(u)
            if len(q.reserved) >= q.queued_need:
                self.queue.remove(qkid)
                self._start(q, q.reserved, now)
                self.outbox.append((qkid, now))
        coop = self.coop_kernel()
        if isinstance(self.policy, TargetOccupancy) and coop is not None and not self.queue:
            free = len(self.available())
            ch = self.channels[coop.kid]
            if free and ch.grant_forks != free:
                ch.grant_forks = free
                self._log(now, "grant", kernel=coop.kid, amount=free)

    # scripted events
    def next_scripted_time(self) -> Optional[int]:
        return self._scripted[0][0] if self._scripted else None

    def poll(self, now: int) -> list:
        """Apply scripted events due at or before ``now``; return new request ids."""
        new = []
        coop = self.coop_kernel()
        while self._scripted and self._scripted[0][0] <= now:
            t, demand, grant = self._scripted.pop(0)
            if coop is None:
                continue
            ch = self.channels[coop.kid]
            # the kernel can never give up group 0
            demand = min(demand, coop.M - 1 - ch.demand_kills)
            if demand > 0:
                ch.demand_kills += demand
                new.append(self._new_request(coop.kid, t, demand))
            if grant:
                ch.grant_forks += grant
                self._log(t, "grant", kernel=coop.kid, amount=grant)
        return new

    # cooperative primitives
    def on_offer_kill(self, kid: int, wg: int, now: int) -> bool:
        ch = self.channels.get(kid)
        entry = self.kernels[kid]
        if ch is None or ch.demand_kills <= 0 or wg != entry.M - 1 or entry.M <= 1:
            return False
        ch.demand_kills -= 1
        unit = entry.wg_units.pop()
        if unit not in entry.wg_units:
            self.unit_status[unit] = None
        self._log(now, "accept", kernel=kid, wg=wg, unit=unit)
        if self._open:
            rec = self.requests[self._open[0]]
            rec.surrendered.append(now)
            if rec.satisfied:
                self._open.pop(0)
                self._log(now, "satisfied", request=rec.rid)
        self._after_release(now)
        return True

    def on_request_fork(self, kid: int, wg: int, now: int) -> int:
        ch = self.channels.get(kid)
        # never grow while units are being reclaimed: with the naive barrier a
        # kill and a fork in one episode would recycle a live slot id
        if ch is None or ch.grant_forks <= 0 or ch.demand_kills > 0:
            return 0
        entry = self.kernels[kid]
        free = self.available()
        k = min(ch.grant_forks, entry.N - entry.M, len(free))
        if k <= 0:
            return 0
        ch.grant_forks -= k
        for u in free[:k]:
            self.unit_status[u] = kid
            entry.wg_units.append(u)
        self._log(now, "fork", kernel=kid, wg=wg, amount=k)
        return k

    def query(self, kid: int) -> int:
        ch = self.channels.get(kid)
        return ch.demand_kills if ch is not None else 0

    def gather_time(self, request_id: int) -> int:
        rec = self.requests[request_id]
        if rec.amount == 0:
            return 0
        if not rec.satisfied:
            raise NotYetSatisfied(f"request {request_id} has {len(rec.surrendered)}/{rec.amount} units")
        return rec.surrendered[rec.amount - 1] - rec.posted

    def check_conservation(self) -> bool:
        free, running = self.counts()
        return free + running == self.units

    def trace_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.trace)

"""Simulated coordinator/agent message fabric on a simpy event loop.

Time is counted in integer ticks. The channel drops each transmission with a
fixed probability drawn from a seeded generator and delays the rest by a
fixed latency plus uniform integer jitter. The coordinator runs stop-and-wait
exchanges per agent and joins them at a per-round barrier.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Mapping, Sequence, TextIO

import numpy as np
import simpy

from .agent import AgentReply, InitialReport, LocalAgent
from .errors import InvalidParameterError, ProtocolError, RoundFailureError
from .logs import format_log_line
from .sqp import TimesVector


logger = logging.getLogger(__name__)

COORDINATOR = 0
DEFAULT_LATENCY_TICKS = 1
DEFAULT_JITTER_TICKS = 0
DEFAULT_TIMEOUT_TICKS = 5
DEFAULT_MAX_RETRANSMISSIONS = 20


class MessageKind(str, Enum):
    EVAL_REQUEST = "EvalRequest"
    EVAL_REPLY = "EvalReply"
    BOUNDS_REPLY = "BoundsReply"
    STEP_BROADCAST = "StepBroadcast"
    FINAL_ASSIGNMENT = "FinalAssignment"
    ACK = "Ack"


@dataclass(frozen=True, eq=False)
class Message:
    kind: MessageKind
    sender: int
    receiver: int
    seq: int
    payload: Any = None
    in_reply_to: int | None = None
    attempt: int = 0


@dataclass(frozen=True)
class ChannelConfig:
    drop_probability: float = 0.0
    latency_ticks: int = DEFAULT_LATENCY_TICKS
    jitter_ticks: int = DEFAULT_JITTER_TICKS
    seed: int = 0
    timeout_ticks: int = DEFAULT_TIMEOUT_TICKS
    max_retransmissions: int = DEFAULT_MAX_RETRANSMISSIONS

    def __post_init__(self) -> None:
        if not 0.0 <= self.drop_probability < 1.0:
            raise InvalidParameterError(f"drop probability must lie in [0, 1), got {self.drop_probability}")
        if self.latency_ticks < 0 or self.jitter_ticks < 0:
            raise InvalidParameterError("latency and jitter must be nonnegative")
        if self.timeout_ticks < 1:
            raise InvalidParameterError(f"timeout must be >= 1 tick, got {self.timeout_ticks}")
        if self.max_retransmissions < 0:
            raise InvalidParameterError("max retransmissions must be nonnegative")


@dataclass(frozen=True)
class DeliveryOutcome:
    dropped: bool
    delivered_at: int | None = None


@dataclass(frozen=True)
class TraceEvent:
    tick: int
    kind: str
    sender: int
    receiver: int
    seq: int
    attempt: int
    dropped: bool
    delivered_at: int | None


@dataclass
class RoundStats:
    round: int
    kind: str
    start_tick: int
    ticks: int = 0
    requests: int = 0
    retransmissions: int = 0
    drops: int = 0
    stale: int = 0
    duplicates: int = 0


class Channel:
    def __init__(self, config: ChannelConfig) -> None:
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.trace: list[TraceEvent] = []

    def transmit(self, message: Message, now: int) -> DeliveryOutcome:
        cfg = self.config
        if self.rng.random() < cfg.drop_probability:
            outcome = DeliveryOutcome(dropped=True)
        else:
            jitter = int(self.rng.integers(0, cfg.jitter_ticks + 1)) if cfg.jitter_ticks else 0
            outcome = DeliveryOutcome(dropped=False, delivered_at=int(now) + cfg.latency_ticks + jitter)

        event = TraceEvent(
            tick=int(now),
            kind=message.kind.value,
            sender=message.sender,
            receiver=message.receiver,
            seq=message.seq,
            attempt=message.attempt,
            dropped=outcome.dropped,
            delivered_at=outcome.delivered_at,
        )
        self.trace.append(event)
        logger.debug(format_log_line("trace", event))
        return outcome


def transmit(message: Message, channel: Channel, now: int) -> DeliveryOutcome:
    return channel.transmit(message, now)


def dump_trace(events: Iterable[TraceEvent], stream: TextIO) -> int:
    count = 0
    for event in events:
        stream.write(format_log_line("trace", event) + "\n")
        count += 1
    return count


@dataclass
class _Pending:
    seq: int
    expected: frozenset[MessageKind]
    event: simpy.Event
    replies: dict[MessageKind, Message] = field(default_factory=dict)


class AgentNode:
    """Wraps a LocalAgent behind an inbox; replies are cached per request stream."""

    def __init__(self, fabric: "Fabric", agent: LocalAgent) -> None:
        self.fabric = fabric
        self.agent = agent
        self.inbox = simpy.Store(fabric.env)
        self._seq: dict[MessageKind, int] = {}
        self._served: dict[MessageKind, tuple[int, list[Message]]] = {}
        fabric.env.process(self._serve())

    @property
    def vehicle(self) -> int:
        return self.agent.vehicle

    def _serve(self):
        while True:
            request = yield self.inbox.get()
            served = self._served.get(request.kind)
            if served is not None and request.seq < served[0]:
                continue
            if served is not None and request.seq == served[0]:
                self.fabric.current.duplicates += 1
                for reply in served[1]:
                    self.fabric.send(replace(reply, attempt=reply.attempt + 1))
                continue

            replies = [
                Message(kind, self.vehicle, COORDINATOR, self._next_seq(kind), payload, request.seq)
                for kind, payload in self._handle(request)
            ]
            self._served[request.kind] = (request.seq, replies)
            for reply in replies:
                self.fabric.send(reply)

    def _handle(self, request: Message) -> list[tuple[MessageKind, Any]]:
        if request.kind is MessageKind.EVAL_REQUEST:
            if request.payload is None:
                return [(MessageKind.EVAL_REPLY, self.agent.initial_report())]
            candidate, relaxed, project = request.payload
            reply = self.agent.respond(candidate, relaxed=relaxed, project=project)
            return [
                (MessageKind.BOUNDS_REPLY, reply.bounds),
                (MessageKind.EVAL_REPLY, (reply.times, reply.evaluation)),
            ]
        if request.kind in (MessageKind.STEP_BROADCAST, MessageKind.FINAL_ASSIGNMENT):
            return [(MessageKind.ACK, request.kind.value)]
        raise ProtocolError(f"agent {self.vehicle} cannot handle {request.kind.value}")

    def _next_seq(self, kind: MessageKind) -> int:
        self._seq[kind] = self._seq.get(kind, 0) + 1
        return self._seq[kind]


class Fabric:
    def __init__(self, agents: Sequence[LocalAgent], config: ChannelConfig | None = None) -> None:
        self.config = config or ChannelConfig()
        self.env = simpy.Environment()
        self.channel = Channel(self.config)
        self.inbox = simpy.Store(self.env)
        self.nodes = {agent.vehicle: AgentNode(self, agent) for agent in agents}
        self.rounds: list[RoundStats] = []
        self.current = RoundStats(round=0, kind="idle", start_tick=0)
        self._seq: dict[MessageKind, int] = {}
        self._pending: dict[int, _Pending] = {}
        self._failures: list[dict[str, Any]] = []
        self.env.process(self._dispatch())

    @property
    def trace(self) -> list[TraceEvent]:
        return self.channel.trace

    @property
    def now(self) -> int:
        return int(self.env.now)

    def send(self, message: Message) -> DeliveryOutcome:
        outcome = transmit(message, self.channel, self.now)
        if outcome.dropped:
            self.current.drops += 1
            return outcome

        target = self.inbox if message.receiver == COORDINATOR else self.nodes[message.receiver].inbox
        self.env.process(self._deliver(target, message, outcome.delivered_at - self.now))
        return outcome

    def run_round(
        self,
        kind: MessageKind,
        payloads: Mapping[int, Any],
        expected: Iterable[MessageKind],
    ) -> dict[int, dict[MessageKind, Message]]:
        """One request per agent, stop-and-wait each, barrier at the end."""
        missing = sorted(set(payloads) - set(self.nodes))
        if missing:
            raise ProtocolError(f"no agent registered for vehicles {missing}")

        seq = self._next_seq(kind)
        self.current = RoundStats(round=len(self.rounds) + 1, kind=kind.value, start_tick=self.now)
        self._failures = []
        expected = frozenset(expected)
        processes = [
            self.env.process(self._exchange(vehicle, kind, seq, payload, expected))
            for vehicle, payload in payloads.items()
        ]
        self.env.run(until=self.env.all_of(processes))

        self.current.ticks = self.now - self.current.start_tick
        self.rounds.append(self.current)
        logger.info(format_log_line("round", self.current))
        if self._failures:
            raise RoundFailureError(
                f"{len(self._failures)} agent(s) unreachable after "
                f"{self.config.max_retransmissions} retransmissions",
                {"round": self.current.round, "kind": kind.value, "timeouts": list(self._failures)},
            )
        return {vehicle: process.value for vehicle, process in zip(payloads, processes)}

    def _exchange(self, vehicle: int, kind: MessageKind, seq: int, payload: Any, expected: frozenset):
        pending = _Pending(seq=seq, expected=expected, event=self.env.event())
        self._pending[vehicle] = pending
        self.current.requests += 1

        for attempt in range(self.config.max_retransmissions + 1):
            if attempt:
                self.current.retransmissions += 1
            self.send(Message(kind, COORDINATOR, vehicle, seq, payload, attempt=attempt))
            yield pending.event | self.env.timeout(self.config.timeout_ticks)
            if pending.event.triggered:
                del self._pending[vehicle]
                return dict(pending.replies)

        del self._pending[vehicle]
        self._failures.append({"vehicle": vehicle, "seq": seq, "attempts": attempt + 1, "tick": self.now})
        return None

    def _dispatch(self):
        while True:
            message = yield self.inbox.get()
            pending = self._pending.get(message.sender)
            if pending is None or message.in_reply_to != pending.seq or message.kind not in pending.expected:
                self.current.stale += 1
                continue
            pending.replies.setdefault(message.kind, message)
            if pending.expected <= pending.replies.keys() and not pending.event.triggered:
                pending.event.succeed()

    def _deliver(self, store: simpy.Store, message: Message, delay: int):
        yield self.env.timeout(delay)
        yield store.put(message)

    def _next_seq(self, kind: MessageKind) -> int:
        self._seq[kind] = self._seq.get(kind, 0) + 1
        return self._seq[kind]


class DistributedBackend:
    """Evaluation backend that routes every request through a lossy Fabric."""

    def __init__(self, agents: Sequence[LocalAgent], config: ChannelConfig | None = None) -> None:
        self.fabric = Fabric(agents, config)

    @property
    def rounds(self) -> list[RoundStats]:
        return self.fabric.rounds

    @property
    def trace(self) -> list[TraceEvent]:
        return self.fabric.trace

    def initial_reports(self) -> dict[int, InitialReport]:
        replies = self.fabric.run_round(
            MessageKind.EVAL_REQUEST,
            {vehicle: None for vehicle in self.fabric.nodes},
            (MessageKind.EVAL_REPLY,),
        )
        return {vehicle: msgs[MessageKind.EVAL_REPLY].payload for vehicle, msgs in replies.items()}

    def evaluate(self, times: TimesVector, *, relaxed: bool, project: bool) -> dict[int, AgentReply]:
        payloads = {v: (pair, relaxed, project) for v, pair in zip(times.order, times.pairs)}
        replies = self.fabric.run_round(
            MessageKind.EVAL_REQUEST,
            payloads,
            (MessageKind.BOUNDS_REPLY, MessageKind.EVAL_REPLY),
        )

        result = {}
        for vehicle, msgs in replies.items():
            bounds = msgs[MessageKind.BOUNDS_REPLY].payload
            reply_times, evaluation = msgs[MessageKind.EVAL_REPLY].payload
            if bounds.t_in != reply_times.t_in:
                raise ProtocolError(f"vehicle {vehicle} returned bounds for a different t_in")
            result[vehicle] = AgentReply(vehicle=vehicle, times=reply_times, bounds=bounds, evaluation=evaluation)
        return result

    def broadcast(self, times: TimesVector, *, final: bool) -> None:
        kind = MessageKind.FINAL_ASSIGNMENT if final else MessageKind.STEP_BROADCAST
        payloads = {v: pair for v, pair in zip(times.order, times.pairs)}
        self.fabric.run_round(kind, payloads, (MessageKind.ACK,))

"""Microbenchmarks: per-chunnel overhead and reconfiguration latency."""

from __future__ import annotations

import statistics
import threading
import time

from ..chunnels import NoopChunnel, ReliabilityChunnel, TagChunnel
from ..core import Chunnel, SelectNode, instantiate, make_stack
from ..errors import ConnectionClosed
from ..reconfig import (
    ReconfigHandle,
    reconfigure_unilateral_barrier,
    reconfigure_unilateral_locked,
)
from ..transport import DatagramChunnel, Endpoint, SimNet
from .metrics import SampleCollector


# --- no-op chunnel overhead ------------------------------------------------------


def _throughput_once(n_chunnels: int, msg_size: int, n_msgs: int, batch: int = 64):
    """One-way transfer of n_msgs through k no-ops on both endpoints."""
    net = SimNet()
    tx_ep, rx_ep = Endpoint("bench", 1), Endpoint("bench", 2)
    layers_tx = [NoopChunnel() for _ in range(n_chunnels)] + [DatagramChunnel(net, tx_ep)]
    layers_rx = [NoopChunnel() for _ in range(n_chunnels)] + [DatagramChunnel(net, rx_ep)]
    tx = instantiate(make_stack(layers_tx), ())
    rx = instantiate(make_stack(layers_rx), ())
    payload = bytes(msg_size)
    msgs = [(rx_ep, payload)] * batch
    n_batches = n_msgs // batch

    done = threading.Event()

    def sender():
        for _ in range(n_batches):
            tx.send(msgs)
        done.set()

    t0 = time.perf_counter()
    snd = threading.Thread(target=sender, daemon=True)
    snd.start()
    slots = [None] * 64
    remaining = n_batches * batch
    while remaining > 0:
        got = rx.recv(slots, timeout=2.0)
        if not got:
            if done.is_set() and remaining > 0:
                raise AssertionError(f"{remaining} messages lost in lossless bench")
            continue
        remaining -= got
    elapsed = time.perf_counter() - t0
    snd.join()
    tx.close()
    rx.close()
    total = n_batches * batch
    return total / elapsed, (total * msg_size * 8) / elapsed / 1e9


def bench_overhead(
    chunnel_counts=(0, 1, 2, 3, 4, 5),
    msg_sizes=(64, 128, 512, 1460),
    trials: int = 10,
    msgs_per_trial: int = 20_000,
):
    """Median messages/s per (chunnel count, size); rows for the CSV schema.

    Trials are interleaved across configurations so clock-speed drift and
    warmup affect every configuration alike.
    """
    _throughput_once(0, 64, msgs_per_trial)  # warmup
    runs: dict = {}
    for _ in range(trials):
        for size in msg_sizes:
            for k in chunnel_counts:
                runs.setdefault((k, size), []).append(
                    _throughput_once(k, size, msgs_per_trial)
                )
    rows = []
    for size in msg_sizes:
        for k in chunnel_counts:
            mps = statistics.median(r[0] for r in runs[(k, size)])
            gbps = statistics.median(r[1] for r in runs[(k, size)])
            rows.append((k, size, mps, gbps))
    return rows


def overhead_ratios(rows):
    """(size -> chunnels -> throughput degradation vs 0 chunnels)."""
    by_size: dict = {}
    for k, size, mps, _ in rows:
        by_size.setdefault(size, {})[k] = mps
    out = {}
    for size, per_k in by_size.items():
        base = per_k.get(0)
        out[size] = {
            k: (base - mps) / base for k, mps in per_k.items() if k != 0 and base
        }
    return out


# --- reconfiguration latency -------------------------------------------------------


class _EchoWorkers:
    """Spin-polling echo servers sharing one connection (and its select)."""

    def __init__(self, conn, n_threads: int, register: bool):
        self.conn = conn
        self.stop = threading.Event()
        self.threads = []
        handle = ReconfigHandle(conn)
        for _ in range(n_threads):
            t = threading.Thread(target=self._loop, args=(handle, register), daemon=True)
            t.start()
            self.threads.append(t)

    def _loop(self, handle, register):
        if register:
            handle.register_thread()
        slots = [None] * 16
        try:
            while not self.stop.is_set():
                try:
                    got = self.conn.recv(slots, timeout=0)
                except ConnectionClosed:
                    return
                if got:
                    self.conn.send([slots[i] for i in range(got)])
                else:
                    time.sleep(0)  # yield while spinning
        finally:
            if register:
                handle.deregister_thread()

    def join(self):
        self.stop.set()
        for t in self.threads:
            t.join(timeout=5)


def bench_reconfig(
    mechanism: str = "locked",
    n_threads: int = 8,
    n_requests: int = 4000,
    swap_every: int = 0,
    n_swaps: int = 1,
    msg_size: int = 64,
    seed: int = 0,
):
    """Echo latency across implementation swaps at the server.

    Returns a dict with latency samples, swap timestamps, the received tag
    transcript, and retransmission counters.  The server side carries a
    reliability chunnel under a tag select, so the trace shows exactly-once
    delivery and which implementation processed each message.
    """
    net = SimNet()
    server_ep, client_ep = Endpoint("rb", 1), Endpoint("rb", 2)
    tags: list = []
    server_stack = make_stack(
        [
            ReliabilityChunnel(),
            SelectNode([TagChunnel(1)], [TagChunnel(2)]),
            DatagramChunnel(net, server_ep),
        ]
    )
    client_stack = make_stack(
        [
            ReliabilityChunnel(),
            TagStrip(tags),
            DatagramChunnel(net, client_ep),
        ]
    )
    server = instantiate(server_stack, (0,), mechanism=mechanism)
    client = instantiate(client_stack, ())
    workers = _EchoWorkers(server, n_threads, register=(mechanism == "barrier"))

    handle = ReconfigHandle(server)
    swap = (
        reconfigure_unilateral_locked
        if mechanism == "locked"
        else reconfigure_unilateral_barrier
    )
    swap_points = []
    if swap_every <= 0:
        swap_every = max(n_requests // (n_swaps + 1), 1)

    samples = SampleCollector()
    slots = [None] * 8
    payload_pad = bytes(max(msg_size - 4, 0))
    branch = 0
    t_start = time.perf_counter()
    for i in range(n_requests):
        msg = i.to_bytes(4, "big") + payload_pad
        t0 = time.perf_counter()
        client.send([(server_ep, msg)])
        reply = None
        deadline = t0 + 5.0
        while reply is None and time.perf_counter() < deadline:
            got = client.recv(slots, timeout=1.0)
            for j in range(got):
                if slots[j][1] == msg:
                    reply = slots[j]
        t1 = time.perf_counter()
        if reply is None:
            raise AssertionError(f"echo failed at request {i}")
        samples.add(t0 - t_start, t1 - t0)
        if swap_every and (i + 1) % swap_every == 0 and len(swap_points) < n_swaps:
            branch = 1 - branch
            swap(handle, branch)
            swap_points.append((time.perf_counter() - t_start, branch))
    workers.join()
    sel = handle.selects()[0]
    out = {
        "mechanism": mechanism,
        "samples": samples.snapshot(),
        "swap_points": swap_points,
        "tags": list(tags),
        "epoch": sel.epoch,
        "guard": sel.guard,
    }
    server.close()
    client.close()
    return out


class TagStrip(Chunnel):
    """Client-side peer for TagChunnel: strips and records one tag byte."""

    input_type = "bytes"
    output_type = "bytes"

    def __init__(self, trace):
        self.trace = trace

    def connect_wrap(self, inner):
        return TagChunnel(0, self.trace).connect_wrap(inner)


def steady_state_median_us(result, exclude_window: float = 0.25) -> float:
    """Median latency away from every swap point (± window seconds)."""
    swaps = [t for t, _ in result["swap_points"]]
    vals = [
        lat * 1e6
        for t, lat in result["samples"]
        if all(abs(t - s) > exclude_window for s in swaps)
    ]
    vals.sort()
    return statistics.median(vals) if vals else float("nan")


def transient_median_us(result, window: float = 0.25) -> float:
    """Median latency in the windows following each swap point."""
    swaps = [t for t, _ in result["swap_points"]]
    vals = [
        lat * 1e6
        for t, lat in result["samples"]
        if any(0 <= t - s <= window for s in swaps)
    ]
    vals.sort()
    return statistics.median(vals) if vals else float("nan")

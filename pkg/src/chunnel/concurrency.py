"""Switching-point guards for runtime reconfiguration.

Two mechanisms protect a select's encapsulated connection:

* LockedGuard: every data-path operation acquires a plain mutex; the
  reconfigurer takes the same mutex, so its release is the switching point.
* QuiesceGuard: data-path operations read a single stop flag on the fast
  path.  A pending reconfiguration sets the flag, waits for all registered
  threads to park at the barrier, swaps with exclusive access, and then
  releases everyone onto the new implementation; the barrier's resolution
  is the switching point.
"""

from __future__ import annotations

import threading
import time
from contextlib import contextmanager

from .errors import BarrierTimeout


class _NoopCM:
    __slots__ = ()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


_NOOP_CM = _NoopCM()


class LockedGuard:
    """Per-connection mutex; enter() on every op, exclusive() to swap."""

    def __init__(self):
        self._lock = threading.Lock()
        self.lock_acquisitions = 0
        self.flag_reads = 0

    def enter(self):
        return self._lock

    @contextmanager
    def exclusive(self, timeout: float = 30.0):
        if not self._lock.acquire(timeout=timeout):
            raise BarrierTimeout("connection lock not acquired in time")
        try:
            yield
        finally:
            self._lock.release()

    # Thread registration is meaningful only for the barrier mechanism.
    def register_thread(self):
        pass

    def deregister_thread(self):
        pass

    def instrument(self):
        self.enter = self._enter_counting  # shadow the fast path

    def _enter_counting(self):
        self.lock_acquisitions += 1
        return self._lock


class QuiesceGuard:
    """Stop-flag barrier: lock-free fast path, quiescence on reconfigure.

    Registered threads must call enter() at the top of every data-path
    operation.  A thread that stops using the connection must deregister,
    otherwise reconfiguration times out waiting for it.
    """

    def __init__(self, default_timeout: float = 5.0):
        self._stop = False
        self._cond = threading.Condition()
        self._swap_serial = threading.Lock()  # one reconfiguration at a time
        self._registered = 0
        self._arrived = 0
        self._generation = 0
        self.default_timeout = default_timeout
        self.lock_acquisitions = 0
        self.flag_reads = 0

    def enter(self):
        if self._stop:
            self._park()
        return _NOOP_CM

    def _park(self):
        with self._cond:
            if not self._stop:
                return
            self._arrived += 1
            gen = self._generation
            self._cond.notify_all()
            while self._stop and self._generation == gen:
                self._cond.wait()

    def register_thread(self):
        with self._cond:
            self._registered += 1

    def deregister_thread(self):
        with self._cond:
            self._registered -= 1
            self._cond.notify_all()

    @contextmanager
    def exclusive(self, timeout: float | None = None):
        timeout = self.default_timeout if timeout is None else timeout
        with self._swap_serial:
            deadline = time.monotonic() + timeout
            with self._cond:
                self._stop = True
                while self._arrived < self._registered:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        missing = self._registered - self._arrived
                        self._stop = False
                        self._arrived = 0
                        self._generation += 1
                        self._cond.notify_all()
                        raise BarrierTimeout(
                            f"{missing} registered thread(s) never "
                            "reached the barrier"
                        )
                    self._cond.wait(remaining)
            # All registered threads are parked; the swap runs with
            # exclusive access without holding the condition lock.
            try:
                yield
            finally:
                with self._cond:
                    self._stop = False
                    self._generation += 1
                    self._arrived = 0
                    self._cond.notify_all()

    def instrument(self):
        self.enter = self._enter_counting

    def _enter_counting(self):
        self.flag_reads += 1
        if self._stop:
            self.lock_acquisitions += 1
            self._park()
        return _NOOP_CM

"""Shared virtual clock for live (socket) runs.

Virtual time is Unix time scaled by ``pace``: every process on the same host
that builds a ``VirtualClock(pace)`` reads the same virtual milliseconds, so
sender stamps and receiver stamps are comparable without a handshake -- the
desk-scale stand-in for NTP-synchronised hosts.  At ``pace`` 1, virtual time
*is* Unix time in ms.
"""

from __future__ import annotations

import time


class VirtualClock:
    def __init__(self, pace: float = 1.0):
        if pace < 1.0:
            raise ValueError("pace must be >= 1")
        self.pace = pace

    def now_ms(self) -> float:
        return time.time() * 1000.0 * self.pace

    def sleep_until_ms(self, virtual_deadline_ms: float) -> None:
        """Block until the virtual clock reaches ``virtual_deadline_ms``."""
        delay = (virtual_deadline_ms - self.now_ms()) / 1000.0 / self.pace
        if delay > 0:
            time.sleep(delay)

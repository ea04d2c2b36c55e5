"""An asyncio event loop whose clock only moves when the loop is idle.

When no callback is ready and no file descriptor is readable, the loop jumps
straight to the next scheduled timer instead of sleeping.  Simulated network
latency and protocol timeouts therefore cost no wall-clock time, and a run is
reproducible as long as all I/O goes through in-memory transports.
"""

import asyncio
import selectors


class _SkippingSelector(selectors.DefaultSelector):

    def __init__(self):
        super().__init__()
        self.now = 0.0

    def select(self, timeout=None):
        ready = super().select(0)
        if ready or timeout is None:
            # Nothing scheduled at all: block for real so threadsafe wakeups
            # (executor shutdown) still work.
            return ready or super().select(timeout)
        if timeout > 0:
            self.now += timeout
        return ready


class VirtualClockLoop(asyncio.SelectorEventLoop):

    def __init__(self):
        self._skipper = _SkippingSelector()
        super().__init__(selector=self._skipper)

    def time(self):
        return self._skipper.now


def run_virtual(main):
    """Run coroutine ``main`` to completion on a fresh virtual-clock loop."""
    loop = VirtualClockLoop()
    try:
        asyncio.set_event_loop(loop)
        return loop.run_until_complete(main)
    finally:
        try:
            pending = [t for t in asyncio.all_tasks(loop) if not t.done()]
            for task in pending:
                task.cancel()
            if pending:
                loop.run_until_complete(asyncio.gather(*pending, return_exceptions=True))
            loop.run_until_complete(loop.shutdown_asyncgens())
        finally:
            asyncio.set_event_loop(None)
            loop.close()

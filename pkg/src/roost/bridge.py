"""Line protocol for log densities evaluated by a foreign process.

The engine writes ``hello <dimension>`` and expects ``ok``; afterwards each
evaluation is one request line ``logd <beta> <x1> ... <xd>`` answered by one
line holding a decimal float or ``-inf``.

Running this module serves a built-in density over stdin/stdout, which is
handy for testing::

    python -m roost.bridge coinflip 2 1
    python -m roost.bridge constant 0.0 --dim 3
"""

import argparse
import math
import os
import selectors
import subprocess
import sys
import threading

DEFAULT_TIMEOUT = 30.0


class BridgeError(RuntimeError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"{message}: {line!r}")
        self.line = line


class BridgeTimeout(BridgeError):
    pass


def parse_response(line):
    text = line.strip()
    if text == "-inf":
        return float("-inf")
    try:
        value = float(text)
    except ValueError:
        raise BridgeError("malformed bridge response", line) from None
    if math.isnan(value) or value == float("inf"):
        raise BridgeError("invalid log density from bridge", line)
    return value


def format_request(beta, x):
    return "logd " + " ".join(repr(float(v)) for v in (beta, *x)) + "\n"


class BridgeTarget:
    """Log-potential backed by a child process speaking the bridge protocol.

    The child is started lazily on first use and is private to this object;
    :meth:`fork` and pickling produce a fresh, unstarted handle.
    """

    def __init__(self, command, dimension, timeout=DEFAULT_TIMEOUT, beta=1.0):
        self.command = list(command)
        self.dimension = dimension
        self.timeout = timeout
        self.beta = beta
        self._proc = None
        self._sel = None
        self._buf = b""
        self._lock = threading.Lock()

    def __getstate__(self):
        return {"command": self.command, "dimension": self.dimension,
                "timeout": self.timeout, "beta": self.beta}

    def __setstate__(self, state):
        self.__init__(state["command"], state["dimension"], state["timeout"], state["beta"])

    def fork(self):
        return BridgeTarget(self.command, self.dimension, self.timeout, self.beta)

    def _start(self):
        self._proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                      bufsize=0)
        self._sel = selectors.DefaultSelector()
        self._sel.register(self._proc.stdout, selectors.EVENT_READ)
        reply = self._exchange(f"hello {self.dimension}\n")
        if reply.strip() != "ok":
            self.close()
            raise BridgeError("bridge handshake failed", reply)

    def _readline(self):
        while b"\n" not in self._buf:
            if not self._sel.select(self.timeout):
                raise BridgeTimeout(f"bridge {self.command[0]} did not answer within {self.timeout:g} s")
            chunk = os.read(self._proc.stdout.fileno(), 65536)
            if not chunk:
                code = self._proc.poll()
                raise BridgeError(f"bridge process exited (status {code})",
                                  self._buf.decode("utf-8", "replace"))
            self._buf += chunk
        line, _, self._buf = self._buf.partition(b"\n")
        return line.decode("utf-8")

    def _exchange(self, request):
        try:
            self._proc.stdin.write(request.encode("utf-8"))
        except (BrokenPipeError, OSError) as e:
            raise BridgeError(f"bridge process not accepting input ({e})") from e
        return self._readline()

    def __call__(self, x):
        if len(x) != self.dimension:
            raise ValueError(f"expected {self.dimension} coordinates, got {len(x)}")
        with self._lock:
            if self._proc is None:
                self._start()
            return parse_response(self._exchange(format_request(self.beta, x)))

    def close(self):
        if self._proc is not None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()
            self._proc = None

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


def child_process_target(command, dimension, timeout=DEFAULT_TIMEOUT):
    return BridgeTarget(command, dimension, timeout)


def serve(logdensity, dimension, stdin=None, stdout=None):
    """Answer bridge requests for ``logdensity`` until stdin closes."""
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    for line in stdin:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "hello":
            if int(parts[1]) != dimension:
                stdout.write(f"error dimension {dimension}\n")
            else:
                stdout.write("ok\n")
        elif parts[0] == "logd":
            x = [float(v) for v in parts[2:]]
            value = logdensity(x)
            stdout.write("-inf\n" if value == float("-inf") else repr(float(value)) + "\n")
        else:
            stdout.write(f"error unknown command {parts[0]}\n")
        stdout.flush()


def main(argv=None):
    from roost.model import Coinflip

    parser = argparse.ArgumentParser(prog="python -m roost.bridge")
    sub = parser.add_subparsers(dest="kind", required=True)
    cf = sub.add_parser("coinflip")
    cf.add_argument("n", type=int)
    cf.add_argument("y", type=int)
    const = sub.add_parser("constant")
    const.add_argument("value")
    const.add_argument("--dim", type=int, default=2)
    args = parser.parse_args(argv)
    if args.kind == "coinflip":
        serve(Coinflip(args.n, args.y), 2)
    else:
        value = float(args.value)
        serve(lambda x: value, args.dim)


if __name__ == "__main__":
    main()

"""Cumulative script assembly and sandboxed execution.

Each attempt concatenates the committed segments with the candidate code
and runs the whole script in a fresh child process, so execution state is
exactly reproducible and retraction is a pure prefix operation. The
sandbox is reached through a newline-delimited JSON stdio protocol; an
in-process runner speaking the same protocol backs tests and local runs.
"""

from __future__ import annotations

import json
import os
import subprocess
import sys
import tempfile
import time
import uuid
from dataclasses import dataclass, field
from threading import Lock

REQUEST_FIELDS = ("code", "time_limit_seconds", "memory_limit_bytes", "stream_cap_bytes", "workdir")
REPLY_FIELDS = (
    "exit_status",
    "stdout",
    "stderr",
    "stdout_truncated",
    "stderr_truncated",
    "wall_time_seconds",
    "limit_hit",
)


class ExecutorError(Exception):
    pass


class ExecutorUnavailable(ExecutorError):
    pass


class SandboxSpawnError(ExecutorError):
    pass


class SandboxProtocolError(ExecutorError):
    pass


class OutOfOrderIndex(ExecutorError):
    pass


class StaleToken(ExecutorError):
    pass


@dataclass(frozen=True)
class SandboxConfig:
    interpreter: str = sys.executable or "python3"
    time_limit_seconds: float = 60.0
    memory_limit_bytes: int = 512 * 1024 * 1024
    stream_cap_bytes: int = 64 * 1024
    workdir: str = "."


@dataclass(frozen=True)
class RollbackToken:
    """Identifies the execution-state prefix that survives a retraction."""

    state_id: str
    boundary_index: int


@dataclass(frozen=True)
class ExecutionReport:
    success: bool
    stdout: str
    stderr: str
    exit_status: int
    wall_time: float
    stdout_truncated: bool = False
    stderr_truncated: bool = False
    limit_hit: str = "none"


@dataclass
class ExecutionState:
    """Ordered, committed code segments for one task stream."""

    config: SandboxConfig = field(default_factory=SandboxConfig)
    segments: list[tuple[int, str]] = field(default_factory=list)
    id: str = field(default_factory=lambda: uuid.uuid4().hex)

    def concatenated(self, extra: str | None = None) -> str:
        parts = [code for _, code in self.segments]
        if extra is not None:
            parts.append(extra)
        return "\n\n".join(parts)


def commit(state: ExecutionState, step_index: int, code: str) -> ExecutionState:
    if state.segments and step_index <= state.segments[-1][0]:
        raise OutOfOrderIndex(
            f"step index {step_index} not greater than last committed {state.segments[-1][0]}"
        )
    state.segments.append((step_index, code))
    return state


def rollback(state: ExecutionState, token: RollbackToken) -> ExecutionState:
    if token.state_id != state.id:
        raise StaleToken("rollback token belongs to another execution state")
    state.segments = [(i, code) for i, code in state.segments if i <= token.boundary_index]
    return state


def _truncate_bytes(data: bytes, cap: int) -> tuple[str, bool]:
    truncated = len(data) > cap
    if truncated:
        data = data[:cap]
    return data.decode("utf-8", errors="replace"), truncated


def _error_reply(diagnostic: str) -> dict:
    return {
        "exit_status": -1,
        "stdout": "",
        "stderr": diagnostic,
        "stdout_truncated": False,
        "stderr_truncated": False,
        "wall_time_seconds": 0.0,
        "limit_hit": "none",
        "error": diagnostic,
    }


class LocalRunner:
    """In-process sandbox runner speaking the stdio JSON-line protocol.

    Scripts still execute in a fresh child interpreter; only the protocol
    endpoint lives in-process. Wall-clock supervision enforces the time
    limit; the memory limit is applied best-effort via RLIMIT_AS.
    """

    def __init__(self, interpreter: str | None = None):
        self.interpreter = interpreter

    def handle_line(self, line: str) -> str:
        try:
            request = json.loads(line)
            if not isinstance(request, dict):
                raise ValueError("request must be a JSON object")
        except (json.JSONDecodeError, ValueError) as exc:
            return json.dumps(_error_reply(f"malformed request: {exc}"))
        return json.dumps(self._execute(request))

    def run_request(self, request: dict) -> dict:
        return json.loads(self.handle_line(json.dumps(request)))

    def _execute(self, request: dict) -> dict:
        code = str(request.get("code", ""))
        try:
            time_limit = float(request.get("time_limit_seconds", 60.0))
            memory_limit = int(request.get("memory_limit_bytes", 512 * 1024 * 1024))
            stream_cap = int(request.get("stream_cap_bytes", 64 * 1024))
        except (TypeError, ValueError) as exc:
            return _error_reply(f"bad limit field: {exc}")
        if time_limit <= 0 or memory_limit <= 0 or stream_cap <= 0:
            return _error_reply("limits must be strictly positive")
        workdir = str(request.get("workdir", ".")) or "."
        interpreter = self.interpreter or sys.executable or "python3"

        os.makedirs(workdir, exist_ok=True)
        with tempfile.NamedTemporaryFile(
            "w", suffix=".py", dir=workdir, delete=False, encoding="utf-8"
        ) as fh:
            fh.write(code)
            script_path = fh.name

        preexec = None
        if hasattr(os, "fork"):
            def preexec() -> None:  # pragma: no cover - runs in the child
                try:
                    import resource

                    resource.setrlimit(resource.RLIMIT_AS, (memory_limit, memory_limit))
                except Exception:
                    pass

        started = time.monotonic()
        limit_hit = "none"
        try:
            proc = subprocess.Popen(
                [interpreter, script_path],
                cwd=workdir,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                preexec_fn=preexec,
            )
        except OSError as exc:
            os.unlink(script_path)
            return _error_reply(f"failed to spawn interpreter: {exc}")
        try:
            out, err = proc.communicate(timeout=time_limit)
        except subprocess.TimeoutExpired:
            proc.kill()
            out, err = proc.communicate()
            limit_hit = "time"
        finally:
            os.unlink(script_path)
        wall = time.monotonic() - started
        exit_status = proc.returncode if limit_hit != "time" else (proc.returncode or -9)

        stdout, out_trunc = _truncate_bytes(out or b"", stream_cap)
        stderr, err_trunc = _truncate_bytes(err or b"", stream_cap)
        if limit_hit == "none" and exit_status != 0:
            if "MemoryError" in stderr or exit_status in (-6, -9, -11):
                if _looks_like_memory_kill(stderr, exit_status):
                    limit_hit = "memory"
        return {
            "exit_status": exit_status,
            "stdout": stdout,
            "stderr": stderr,
            "stdout_truncated": out_trunc,
            "stderr_truncated": err_trunc,
            "wall_time_seconds": wall,
            "limit_hit": limit_hit,
        }


def _looks_like_memory_kill(stderr: str, exit_status: int) -> bool:
    return "MemoryError" in stderr or exit_status == -9


class SubprocessSandbox:
    """Client for an external runner process speaking the same protocol."""

    def __init__(self, command: list[str]):
        self.command = list(command)
        self._lock = Lock()
        try:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise SandboxSpawnError(f"cannot start runner {self.command}: {exc}") from None

    def run_request(self, request: dict) -> dict:
        with self._lock:
            if self._proc.poll() is not None:
                raise SandboxSpawnError("runner process has exited")
            try:
                self._proc.stdin.write(json.dumps(request) + "\n")
                self._proc.stdin.flush()
                line = self._proc.stdout.readline()
            except (BrokenPipeError, OSError) as exc:
                raise SandboxSpawnError(f"runner pipe failure: {exc}") from None
        if not line:
            raise SandboxProtocolError("runner closed its output stream")
        try:
            reply = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SandboxProtocolError(f"malformed runner reply: {exc}") from None
        if not isinstance(reply, dict):
            raise SandboxProtocolError("runner reply is not a JSON object")
        return reply

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.terminate()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()

    def __enter__(self) -> SubprocessSandbox:
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def execute_attempt(state: ExecutionState, candidate: str, runner) -> ExecutionReport:
    """Run committed segments plus ``candidate`` as one fresh script.

    The state is unchanged; approved code is committed separately.
    """
    if runner is None:
        raise ExecutorUnavailable("no sandbox runner configured")
    request = {
        "code": state.concatenated(candidate),
        "time_limit_seconds": state.config.time_limit_seconds,
        "memory_limit_bytes": state.config.memory_limit_bytes,
        "stream_cap_bytes": state.config.stream_cap_bytes,
        "workdir": state.config.workdir,
    }
    reply = runner.run_request(request)
    missing = [key for key in REPLY_FIELDS if key not in reply]
    if missing:
        raise SandboxProtocolError(f"runner reply missing fields: {missing}")
    return ExecutionReport(
        success=reply["exit_status"] == 0
        and reply["limit_hit"] == "none"
        and "error" not in reply,
        stdout=str(reply["stdout"]),
        stderr=str(reply["stderr"]),
        exit_status=int(reply["exit_status"]),
        wall_time=float(reply["wall_time_seconds"]),
        stdout_truncated=bool(reply["stdout_truncated"]),
        stderr_truncated=bool(reply["stderr_truncated"]),
        limit_hit=str(reply["limit_hit"]),
    )

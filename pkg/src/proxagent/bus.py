"""Environment-agnostic publish/subscribe message bus.

A fixed naming contract defines every channel the agent and the environment
may use, so the decision loop never branches on which backend it is talking
to. Sensor keys carry upstream data (environment -> agent), command keys
carry downstream data (agent -> environment). Payloads are UTF-8 JSON with
a per-key schema.

Ships an in-process backend (thread-safe, per-key FIFO, at-most-once
delivery) plus an adapter for an external Redis-style key-value pub/sub
service. The adapter is optional; it requires the ``redis`` package and a
reachable server, and it inherits that server's native delivery semantics.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional


class BusError(Exception):
    pass


class UnknownKey(BusError):
    pass


class SchemaViolation(BusError):
    pass


class BackendUnavailable(BusError):
    pass


# Contract keys. Sensor keys are upstream-only, command keys downstream-only.
SENSOR_RGB = "sensor/rgb/latest"
SENSOR_LIDAR = "sensor/lidar/latest"
SENSOR_RGB_NOTIFY = "sensor/rgb/notify"
CMD_POSE_DELTA = "cmd/pose_delta"
CMD_EXPOSURE = "cmd/exposure"
CMD_TERMINATE = "cmd/terminate"

SENSOR_KEYS = (SENSOR_RGB, SENSOR_LIDAR, SENSOR_RGB_NOTIFY)
COMMAND_KEYS = (CMD_POSE_DELTA, CMD_EXPOSURE, CMD_TERMINATE)
CONTRACT_KEYS = SENSOR_KEYS + COMMAND_KEYS

_NUMBER = (int, float)

# Required fields per key: name -> accepted types. ``None`` in the tuple
# means the field may be null. Extra fields are allowed (e.g. diagnostic
# notes attached by the environment bridge).
CHANNEL_SCHEMAS: dict[str, dict[str, tuple]] = {
    SENSOR_RGB: {
        "visible": (bool,),
        "bearing_az": _NUMBER,
        "bearing_el": _NUMBER,
        "angular_size": _NUMBER,
        "mean_brightness": _NUMBER,
        "exposure_gain": _NUMBER,
        "step_index": (int,),
        "collided": (bool,),
        "true_range": _NUMBER,
    },
    SENSOR_LIDAR: {"range_m": _NUMBER + (type(None),)},
    SENSOR_RGB_NOTIFY: {"seq": (int,)},
    CMD_POSE_DELTA: {
        "dx": _NUMBER,
        "dy": _NUMBER,
        "dz": _NUMBER,
        "dyaw": _NUMBER,
        "dpitch": _NUMBER,
        "droll": _NUMBER,
    },
    CMD_EXPOSURE: {"gain_delta": _NUMBER},
    CMD_TERMINATE: {},
}


def check_key(key: str) -> None:
    if key not in CONTRACT_KEYS:
        raise UnknownKey(f"not a contract key: {key!r}")


def validate_payload(key: str, payload: bytes) -> dict:
    """Decode and validate a payload against the key's schema."""
    check_key(key)
    try:
        record = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise SchemaViolation(f"payload for {key} is not UTF-8 JSON: {exc}") from exc
    if not isinstance(record, dict):
        raise SchemaViolation(f"payload for {key} must be a JSON object")
    schema = CHANNEL_SCHEMAS[key]
    for field, types in schema.items():
        if field not in record:
            raise SchemaViolation(f"payload for {key} missing field {field!r}")
        value = record[field]
        # bool is an int subclass; reject bools where a number is expected.
        if isinstance(value, bool) and bool not in types:
            raise SchemaViolation(f"{key}.{field}: expected {types}, got bool")
        if not isinstance(value, types):
            raise SchemaViolation(
                f"{key}.{field}: expected {types}, got {type(value).__name__}"
            )
    return record


def encode(record: dict) -> bytes:
    return json.dumps(record, sort_keys=True).encode("utf-8")


@dataclass(frozen=True)
class BusMessage:
    key: str
    payload: bytes
    seq: int
    timestamp: int  # milliseconds since epoch

    def record(self) -> dict:
        return json.loads(self.payload.decode("utf-8"))


Handler = Callable[[BusMessage], None]


class Subscription:
    """Handle returned by subscribe(); transferable between threads."""

    def __init__(self, unsubscribe: Callable[[], None]):
        self._unsubscribe = unsubscribe
        self._active = True

    def cancel(self) -> None:
        if self._active:
            self._active = False
            self._unsubscribe()


class BusBackend:
    """Contract every backend implements. Agent modules depend only on this."""

    def publish(self, key: str, payload: bytes) -> int:
        raise NotImplementedError

    def get_latest(self, key: str) -> Optional[BusMessage]:
        raise NotImplementedError

    def subscribe(self, key: str, handler: Handler) -> Subscription:
        raise NotImplementedError


class InProcessBus(BusBackend):
    """Thread-safe in-process backend with per-key FIFO, at-most-once delivery.

    Handlers run synchronously on the publisher's thread, under a per-key
    delivery lock, which guarantees per-key ordering.
    """

    def __init__(self) -> None:
        self._lock = threading.RLock()
        self._seq: dict[str, int] = {key: 0 for key in CONTRACT_KEYS}
        self._latest: dict[str, BusMessage] = {}
        self._subs: dict[str, list[Handler]] = {key: [] for key in CONTRACT_KEYS}

    def publish(self, key: str, payload: bytes) -> int:
        validate_payload(key, payload)
        with self._lock:
            self._seq[key] += 1
            msg = BusMessage(
                key=key,
                payload=payload,
                seq=self._seq[key],
                timestamp=int(time.time() * 1000),
            )
            self._latest[key] = msg
            handlers = list(self._subs[key])
            for handler in handlers:
                try:
                    handler(msg)
                except Exception:
                    # a misbehaving subscriber must not break the others
                    continue
            return msg.seq

    def get_latest(self, key: str) -> Optional[BusMessage]:
        check_key(key)
        with self._lock:
            return self._latest.get(key)

    def subscribe(self, key: str, handler: Handler) -> Subscription:
        check_key(key)
        with self._lock:
            self._subs[key].append(handler)

        def _unsub() -> None:
            with self._lock:
                if handler in self._subs[key]:
                    self._subs[key].remove(handler)

        return Subscription(_unsub)


class RedisBusAdapter(BusBackend):
    """Adapter for an external Redis server.

    Latest-value semantics use ``SET``/``GET`` on the contract key; pub/sub
    delivery uses Redis PUBLISH/SUBSCRIBE on the same name. Delivery is
    Redis-native (at-most-once to connected subscribers); this adapter does
    not add retries or persistence on top.
    """

    def __init__(self, url: str = "redis://localhost:6379/0", prefix: str = "proxagent:"):
        try:
            import redis  # noqa: PLC0415
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise BackendUnavailable("redis package not installed") from exc
        self._redis = redis.Redis.from_url(url)
        self._prefix = prefix
        try:
            self._redis.ping()
        except Exception as exc:  # pragma: no cover - requires live server
            raise BackendUnavailable(f"redis unreachable: {exc}") from exc
        self._pubsub_threads: list = []

    def _name(self, key: str) -> str:
        return self._prefix + key

    def publish(self, key: str, payload: bytes) -> int:
        validate_payload(key, payload)
        try:
            seq = int(self._redis.incr(self._name(key) + ":seq"))
            envelope = json.dumps(
                {
                    "seq": seq,
                    "timestamp": int(time.time() * 1000),
                    "payload": payload.decode("utf-8"),
                }
            )
            self._redis.set(self._name(key), envelope)
            self._redis.publish(self._name(key), envelope)
            return seq
        except BusError:
            raise
        except Exception as exc:  # pragma: no cover - requires live server
            raise BackendUnavailable(str(exc)) from exc

    def get_latest(self, key: str) -> Optional[BusMessage]:
        check_key(key)
        raw = self._redis.get(self._name(key))
        if raw is None:
            return None
        envelope = json.loads(raw)
        return BusMessage(
            key=key,
            payload=envelope["payload"].encode("utf-8"),
            seq=envelope["seq"],
            timestamp=envelope["timestamp"],
        )

    def subscribe(self, key: str, handler: Handler) -> Subscription:
        check_key(key)
        pubsub = self._redis.pubsub(ignore_subscribe_messages=True)

        def _on_message(message) -> None:
            envelope = json.loads(message["data"])
            handler(
                BusMessage(
                    key=key,
                    payload=envelope["payload"].encode("utf-8"),
                    seq=envelope["seq"],
                    timestamp=envelope["timestamp"],
                )
            )

        pubsub.subscribe(**{self._name(key): _on_message})
        thread = pubsub.run_in_thread(sleep_time=0.005, daemon=True)
        self._pubsub_threads.append(thread)

        def _unsub() -> None:
            thread.stop()
            pubsub.close()

        return Subscription(_unsub)


def make_backend(name: str, **kwargs) -> BusBackend:
    """Instantiate a backend by configuration name."""
    if name == "inprocess":
        return InProcessBus()
    if name == "redis":
        return RedisBusAdapter(**kwargs)
    raise BusError(f"unknown bus backend: {name!r}")

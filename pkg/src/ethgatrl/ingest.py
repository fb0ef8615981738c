"""Block ingestion over Ethereum JSON-RPC, an NDJSON block cache, and a
deterministic synthetic block generator for offline work.

Synthetic generator
-------------------
``synth_blocks`` is specified exactly so that an independent generator can
reproduce it draw for draw.  With ``rng = numpy.random.default_rng(seed)``:

* the address pool holds ``pool_size`` addresses, address ``k`` being
  ``"0x" + format(k + 1, "040x")``;
* pick probabilities are ``p_k ∝ (k + 1) ** -zipf_exponent`` (normalized),
  so low indices are hubs;
* for block ``b`` in ``0 .. n_blocks - 1`` the draws are, in this order:

  1. ``n = rng.poisson(txs_per_block)`` (or ``n = txs_per_block`` when
     ``tx_distribution == "fixed"``, which consumes no draw), then
     ``n = min(n, gas_limit // 53000)``;
  2. ``senders = rng.choice(pool_size, size=n, p=p)``;
  3. ``receivers = rng.choice(pool_size, size=n, p=p)``;
  4. ``creates = rng.random(n) < contract_creation_rate``;
  5. ``values = rng.integers(0, 2**60, size=n)`` (wei);
  6. ``prices = rng.integers(1, 201, size=n)`` (gwei).

  Transaction ``i`` of block ``b`` has ``to = None`` when ``creates[i]``,
  ``gas = 53000`` for creations and ``21000`` otherwise,
  ``gas_price = prices[i] * 10**9`` and
  ``hash = "0x" + sha256(f"{seed}:{number}:{i}").hexdigest()``.
  The block number is ``first_block + b``, its timestamp
  ``genesis_timestamp + 12 * b`` and ``gas_used`` the sum of transaction gas.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np
import requests

log = logging.getLogger(__name__)

ENDPOINT_ENV_VAR = "ETHGATRL_ENDPOINT"
MAX_ATTEMPTS = 5
BACKOFF_BASE_S = 0.25


class IngestError(Exception):
    """Base class for ingestion failures."""


class TransportError(IngestError):
    """The endpoint could not be reached after all retries."""


class ProtocolError(IngestError):
    """The endpoint answered with a JSON-RPC error object or a bad envelope."""


class ParseError(IngestError):
    """A field could not be decoded (bad hex, missing key, corrupt cache line)."""


class RangeFetchError(IngestError):
    def __init__(self, number: int, cause: Exception):
        super().__init__(f"block {number} failed: {cause}")
        self.number = number
        self.cause = cause


# ---------------------------------------------------------------------------
# hex codecs


def parse_quantity(s, bits: int = 256) -> int:
    """Decode a 0x-prefixed hex quantity, rejecting anything over ``bits`` bits."""
    if not isinstance(s, str) or len(s) < 3 or s[:2] not in ("0x", "0X"):
        raise ParseError(f"not a 0x-hex quantity: {s!r}")
    digits = s[2:]
    try:
        value = int(digits, 16)
    except ValueError:
        raise ParseError(f"not a 0x-hex quantity: {s!r}") from None
    # int() tolerates '_' and surrounding whitespace; hex strings must not
    if not all(c in "0123456789abcdefABCDEF" for c in digits):
        raise ParseError(f"not a 0x-hex quantity: {s!r}")
    if value.bit_length() > bits:
        raise ParseError(f"quantity exceeds {bits} bits: {s!r}")
    return value


def encode_quantity(value: int) -> str:
    if value < 0:
        raise ValueError("quantities are unsigned")
    return hex(value)


def parse_data(s, n_bytes: int) -> str:
    """Validate fixed-width hex data (hash, address); return it lowercased."""
    if not isinstance(s, str) or s[:2] not in ("0x", "0X") or len(s) != 2 + 2 * n_bytes:
        raise ParseError(f"expected {n_bytes}-byte hex data, got {s!r}")
    body = s[2:].lower()
    if not all(c in "0123456789abcdef" for c in body):
        raise ParseError(f"expected {n_bytes}-byte hex data, got {s!r}")
    return "0x" + body


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class TxRecord:
    hash: str
    sender: str
    to: Optional[str]
    value: int
    gas: int
    gas_price: int

    @property
    def is_contract_creation(self) -> bool:
        return self.to is None

    @classmethod
    def from_json(cls, obj: dict) -> "TxRecord":
        try:
            to = obj.get("to")
            return cls(
                hash=parse_data(obj["hash"], 32),
                sender=parse_data(obj["from"], 20),
                to=None if to is None else parse_data(to, 20),
                value=parse_quantity(obj["value"]),
                gas=parse_quantity(obj["gas"]),
                gas_price=parse_quantity(obj["gasPrice"]),
            )
        except KeyError as exc:
            raise ParseError(f"transaction missing field {exc}") from None

    def to_json(self) -> dict:
        return {
            "hash": self.hash,
            "from": self.sender,
            "to": self.to,
            "value": encode_quantity(self.value),
            "gas": encode_quantity(self.gas),
            "gasPrice": encode_quantity(self.gas_price),
        }


@dataclass(frozen=True)
class BlockRecord:
    number: int
    timestamp: int
    gas_limit: int
    gas_used: int
    transactions: tuple[TxRecord, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.gas_used > self.gas_limit:
            raise ParseError(f"block {self.number}: gasUsed {self.gas_used} > gasLimit {self.gas_limit}")

    @classmethod
    def from_json(cls, obj: dict) -> "BlockRecord":
        if not isinstance(obj, dict):
            raise ParseError(f"block must be a JSON object, got {type(obj).__name__}")
        try:
            txs = obj["transactions"]
            if any(not isinstance(t, dict) for t in txs):
                raise ParseError("transactions must be full objects (request with the full-tx flag)")
            return cls(
                number=parse_quantity(obj["number"]),
                timestamp=parse_quantity(obj["timestamp"]),
                gas_limit=parse_quantity(obj["gasLimit"]),
                gas_used=parse_quantity(obj["gasUsed"]),
                transactions=tuple(TxRecord.from_json(t) for t in txs),
            )
        except KeyError as exc:
            raise ParseError(f"block missing field {exc}") from None

    def to_json(self) -> dict:
        return {
            "number": encode_quantity(self.number),
            "timestamp": encode_quantity(self.timestamp),
            "gasLimit": encode_quantity(self.gas_limit),
            "gasUsed": encode_quantity(self.gas_used),
            "transactions": [t.to_json() for t in self.transactions],
        }


@dataclass(frozen=True)
class BlockRange:
    start_block: int
    end_block: int

    def __post_init__(self):
        if self.start_block < 0 or self.start_block > self.end_block:
            raise ValueError(f"invalid block range [{self.start_block}, {self.end_block}]")

    def __iter__(self):
        return iter(range(self.start_block, self.end_block + 1))

    def __len__(self):
        return self.end_block - self.start_block + 1


# ---------------------------------------------------------------------------
# JSON-RPC transport


def resolve_endpoint(flag: Optional[str]) -> Optional[str]:
    """CLI flag wins over the environment variable."""
    return flag or os.environ.get(ENDPOINT_ENV_VAR) or None


class RpcClient:
    def __init__(self, endpoint: str, *, timeout: float = 30.0, max_attempts: int = MAX_ATTEMPTS,
                 backoff_base: float = BACKOFF_BASE_S, sleep: Callable[[float], None] = time.sleep,
                 session: Optional[requests.Session] = None):
        self.endpoint = endpoint
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self._sleep = sleep
        self._session = session or requests.Session()
        self._next_id = 0

    def call(self, method: str, params: list):
        self._next_id += 1
        payload = {"jsonrpc": "2.0", "id": self._next_id, "method": method, "params": params}
        last_exc: Exception | None = None
        for attempt in range(self.max_attempts):
            if attempt:
                self._sleep(self.backoff_base * 2 ** (attempt - 1))
            try:
                resp = self._session.post(self.endpoint, json=payload, timeout=self.timeout)
            except requests.RequestException as exc:
                last_exc = exc
                log.debug("%s attempt %d failed: %s", method, attempt + 1, exc)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last_exc = TransportError(f"HTTP {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise ProtocolError(f"{method}: HTTP {resp.status_code}")
            try:
                body = resp.json()
            except ValueError:
                raise ProtocolError(f"{method}: response is not JSON") from None
            if not isinstance(body, dict):
                raise ProtocolError(f"{method}: response is not a JSON-RPC object")
            if body.get("error") is not None:
                err = body["error"]
                raise ProtocolError(f"{method}: RPC error {err.get('code')}: {err.get('message')}")
            if "result" not in body:
                raise ProtocolError(f"{method}: response has neither result nor error")
            return body["result"]
        raise TransportError(f"{method} failed after {self.max_attempts} attempts: {last_exc}")

    def block_number(self) -> int:
        return parse_quantity(self.call("eth_blockNumber", []))

    def get_block(self, number: int) -> BlockRecord:
        result = self.call("eth_getBlockByNumber", [encode_quantity(number), True])
        if result is None:
            raise ProtocolError(f"block {number} not found (beyond chain head?)")
        return BlockRecord.from_json(result)


def fetch_block(endpoint: str | RpcClient, number: int) -> BlockRecord:
    client = endpoint if isinstance(endpoint, RpcClient) else RpcClient(endpoint)
    return client.get_block(number)


def fetch_range(endpoint: str | RpcClient, block_range: BlockRange, parallelism: int = 4) -> list[BlockRecord]:
    """Fetch every block in the range; the result is sorted by block number."""
    if parallelism < 1:
        raise ValueError("parallelism must be positive")
    client = endpoint if isinstance(endpoint, RpcClient) else RpcClient(endpoint)

    def one(number):
        try:
            return client.get_block(number)
        except IngestError as exc:
            raise RangeFetchError(number, exc) from exc

    numbers = list(block_range)
    if parallelism == 1:
        blocks = [one(n) for n in numbers]
    else:
        # the pool bounds in-flight requests to `parallelism`
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            blocks = list(pool.map(one, numbers))
    return sorted(blocks, key=lambda b: b.number)


# ---------------------------------------------------------------------------
# NDJSON cache


def dumps_block(block: BlockRecord) -> str:
    return json.dumps(block.to_json(), separators=(",", ":"), ensure_ascii=True)


def cache_write(path, blocks: Iterable[BlockRecord]) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for block in blocks:
            fh.write(dumps_block(block))
            fh.write("\n")


def cache_read(path) -> list[BlockRecord]:
    blocks = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                blocks.append(BlockRecord.from_json(json.loads(line)))
            except (ValueError, ParseError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    return blocks


# ---------------------------------------------------------------------------
# synthetic blocks


def synth_address(k: int) -> str:
    return "0x" + format(k + 1, "040x")


def synth_blocks(seed: int, n_blocks: int, txs_per_block: float = 20, *, tx_distribution: str = "poisson",
                 pool_size: int = 500, zipf_exponent: float = 1.1, contract_creation_rate: float = 0.02,
                 first_block: int = 1, genesis_timestamp: int = 1_600_000_000,
                 gas_limit: int = 30_000_000) -> list[BlockRecord]:
    """Deterministic synthetic block stream; the draw order is documented in the module docstring."""
    if n_blocks < 1:
        raise ValueError("n_blocks must be >= 1")
    if pool_size < 1:
        raise ValueError("pool_size must be >= 1")
    if tx_distribution not in ("poisson", "fixed"):
        raise ValueError(f"unknown tx_distribution {tx_distribution!r}")
    rng = np.random.default_rng(seed)
    weights = np.arange(1, pool_size + 1, dtype=np.float64) ** -zipf_exponent
    p = weights / weights.sum()
    pool = [synth_address(k) for k in range(pool_size)]
    blocks = []
    for b in range(n_blocks):
        number = first_block + b
        n = int(rng.poisson(txs_per_block)) if tx_distribution == "poisson" else int(txs_per_block)
        n = min(n, gas_limit // 53000)
        senders = rng.choice(pool_size, size=n, p=p)
        receivers = rng.choice(pool_size, size=n, p=p)
        creates = rng.random(n) < contract_creation_rate
        values = rng.integers(0, 2**60, size=n)
        prices = rng.integers(1, 201, size=n)
        txs = []
        for i in range(n):
            create = bool(creates[i])
            txs.append(TxRecord(
                hash="0x" + hashlib.sha256(f"{seed}:{number}:{i}".encode()).hexdigest(),
                sender=pool[senders[i]],
                to=None if create else pool[receivers[i]],
                value=int(values[i]),
                gas=53000 if create else 21000,
                gas_price=int(prices[i]) * 10**9,
            ))
        blocks.append(BlockRecord(
            number=number,
            timestamp=genesis_timestamp + 12 * b,
            gas_limit=gas_limit,
            gas_used=sum(t.gas for t in txs),
            transactions=tuple(txs),
        ))
    return blocks

"""Chain data types and the ERC-20 Transfer log codec."""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache

from Crypto.Hash import keccak

WORD_SIZE = 32
ADDRESS_SIZE = 20
TRANSFER_SIGNATURE = "Transfer(address,address,uint256)"
_ADDRESS_PAD = bytes(WORD_SIZE - ADDRESS_SIZE)
UINT256_MAX = (1 << 256) - 1
_HEX_DIGITS = re.compile(r"[0-9a-fA-F]+")


class MalformedLogError(ValueError):
    """A log carries the Transfer signature but not the Transfer ABI shape."""


class HexParseError(ValueError):
    pass


class Address(bytes):
    """20-byte account or contract identifier.

    Behaves as ``bytes`` for hashing and comparison; ``str()`` gives the
    canonical lowercase ``0x`` form.
    """

    __slots__ = ()

    def __new__(cls, value: bytes | bytearray | memoryview = bytes(ADDRESS_SIZE)) -> "Address":
        if len(value) != ADDRESS_SIZE:
            raise ValueError(f"address must be {ADDRESS_SIZE} bytes, got {len(value)}")
        return super().__new__(cls, value)

    @classmethod
    def from_hex(cls, text: str) -> "Address":
        raw = _strip_hex(text, ADDRESS_SIZE * 2, "address")
        return cls(bytes.fromhex(raw))

    @property
    def is_zero(self) -> bool:
        return self == ZERO_ADDRESS

    def __str__(self) -> str:
        return "0x" + self.hex()

    def __repr__(self) -> str:
        return f"Address({self})"


ZERO_ADDRESS = Address(bytes(ADDRESS_SIZE))


@dataclass(frozen=True, slots=True)
class LogPosition:
    block_number: int
    tx_hash: bytes
    log_index: int

    @property
    def key(self) -> tuple[int, int]:
        """Sort key; strictly increasing within a well-formed stream."""
        return (self.block_number, self.log_index)


@dataclass(frozen=True, slots=True)
class RawLog:
    emitter: Address
    topics: tuple[bytes, ...]
    data: bytes
    position: LogPosition


@dataclass(frozen=True, slots=True)
class TransferEvent:
    token: Address
    sender: Address
    recipient: Address
    value: int
    position: LogPosition

    @property
    def is_mint(self) -> bool:
        return self.sender == ZERO_ADDRESS

    @property
    def is_burn(self) -> bool:
        return self.recipient == ZERO_ADDRESS


def keccak256(data: bytes) -> bytes:
    return keccak.new(digest_bits=256, data=data).digest()


@lru_cache(maxsize=1)
def transfer_topic0() -> bytes:
    return keccak256(TRANSFER_SIGNATURE.encode("ascii"))


def decode_transfer(log: RawLog) -> TransferEvent | None:
    """Decode an ERC-20 Transfer log, or return None for any other event.

    Raises MalformedLogError when topic0 is the Transfer hash but the log
    does not have exactly two indexed addresses and one 32-byte data word.
    """
    topics = log.topics
    if not topics or topics[0] != transfer_topic0():
        return None
    if len(topics) != 3 or len(log.data) != WORD_SIZE:
        raise MalformedLogError(
            f"Transfer log at block {log.position.block_number} index {log.position.log_index}: "
            f"{len(topics)} topics, {len(log.data)} data bytes"
        )
    for word in topics[1:]:
        if len(word) != WORD_SIZE or word[:12] != _ADDRESS_PAD:
            raise MalformedLogError(
                f"Transfer log at block {log.position.block_number} index "
                f"{log.position.log_index}: indexed address word is not a padded address"
            )
    return TransferEvent(
        token=log.emitter,
        sender=Address(topics[1][12:]),
        recipient=Address(topics[2][12:]),
        value=int.from_bytes(log.data, "big"),
        position=log.position,
    )


def encode_transfer(event: TransferEvent) -> RawLog:
    if not 0 <= event.value <= UINT256_MAX:
        raise ValueError("transfer value outside uint256 range")
    return RawLog(
        emitter=event.token,
        topics=(
            transfer_topic0(),
            _ADDRESS_PAD + event.sender,
            _ADDRESS_PAD + event.recipient,
        ),
        data=event.value.to_bytes(WORD_SIZE, "big"),
        position=event.position,
    )


def parse_hex_quantity(text: str) -> int:
    """Parse a JSON-RPC quantity such as ``"0x8c4ed2"`` (zero padding allowed)."""
    if not isinstance(text, str) or not text.startswith(("0x", "0X")):
        raise HexParseError(f"hex quantity must start with 0x: {text!r}")
    digits = text[2:]
    if not _HEX_DIGITS.fullmatch(digits):
        raise HexParseError(f"invalid hex quantity: {text!r}")
    return int(digits, 16)


def word_to_hex(word: bytes) -> str:
    return "0x" + word.hex()


def parse_word(text: str) -> bytes:
    return bytes.fromhex(_strip_hex(text, WORD_SIZE * 2, "32-byte word"))


def parse_data(text: str) -> bytes:
    if not text.startswith("0x"):
        raise HexParseError(f"data must start with 0x: {text!r}")
    body = text[2:]
    if len(body) % 2 or (body and not _HEX_DIGITS.fullmatch(body)):
        raise HexParseError(f"invalid data hex: {text!r}")
    return bytes.fromhex(body)


def _strip_hex(text: str, n_digits: int, what: str) -> str:
    if not isinstance(text, str) or not text.startswith(("0x", "0X")):
        raise HexParseError(f"{what} must start with 0x: {text!r}")
    body = text[2:]
    if len(body) != n_digits or not _HEX_DIGITS.fullmatch(body):
        raise HexParseError(f"{what} must be {n_digits} hex digits: {text!r}")
    return body

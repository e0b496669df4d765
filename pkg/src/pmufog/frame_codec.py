"""Fixed 112-byte synchrophasor data frame.

Big-endian layout::

    offset size field
         0    2 SYNC       0xAA01 (data frame, version 1)
         2    2 FRAMESIZE  always 112
         4    2 IDCODE
         6    4 SOC        seconds of century
        10    4 FRACSEC    bits 0-23 fraction, bits 24-27 time quality, 28-31 zero
        14    2 STAT       bit 15 = fog anomaly flag
        16   80 PHASORS    10 x (real float32, imag float32)
        96    4 FREQ       float32, deviation from nominal (Hz)
       100    4 DFREQ      float32, ROCOF (Hz/s)
       104    4 ANALOG     float32
       108    2 DIGITAL
       110    2 CHK        CRC-CCITT (poly 0x1021, init 0xFFFF) of bytes 0..109
"""

from __future__ import annotations

import binascii
import numbers
import struct
from dataclasses import dataclass, field, replace

SYNC = 0xAA01
FRAME_SIZE = 112
N_PHASORS = 10
ANOMALY_BIT = 0x8000
TIME_BASE = 1 << 24

_BODY = struct.Struct(">HHHIIH" + "ff" * N_PHASORS + "fffH")
assert _BODY.size + 2 == FRAME_SIZE


class FrameError(ValueError):
    pass


class FrameEncodeError(FrameError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class FrameLengthError(FrameError):
    pass


class FrameSyncError(FrameError):
    pass


class FrameSizeError(FrameError):
    pass


class FrameCrcError(FrameError):
    pass


class FrameFieldError(FrameError):
    pass


def crc_ccitt(data: bytes) -> int:
    return binascii.crc_hqx(data, 0xFFFF)


@dataclass(frozen=True)
class DataFrame:
    id_code: int
    soc: int
    fracsec: int = 0
    time_quality: int = 0
    stat: int = 0
    phasors: tuple[complex, ...] = field(default=(0j,) * N_PHASORS)
    freq: float = 0.0
    dfreq: float = 0.0
    analog: float = 0.0
    digital: int = 0

    @property
    def anomaly(self) -> bool:
        return bool(self.stat & ANOMALY_BIT)

    def with_anomaly(self, flag: bool) -> "DataFrame":
        stat = self.stat | ANOMALY_BIT if flag else self.stat & ~ANOMALY_BIT
        return replace(self, stat=stat)

    @property
    def timestamp(self) -> float:
        return self.soc + self.fracsec / TIME_BASE


def _check_uint(name: str, value, bits: int) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise FrameEncodeError(name, f"expected an integer, got {type(value).__name__}")
    value = int(value)
    if not 0 <= value < (1 << bits):
        raise FrameEncodeError(name, f"{value} outside [0, 2**{bits})")
    return value


def _check_float(name: str, value) -> float:
    try:
        struct.pack(">f", value)
    except (OverflowError, struct.error, TypeError) as exc:
        raise FrameEncodeError(name, f"{value!r} not representable as float32") from exc
    return float(value)


def encode(frame: DataFrame) -> bytes:
    idc = _check_uint("id_code", frame.id_code, 16)
    soc = _check_uint("soc", frame.soc, 32)
    frac = _check_uint("fracsec", frame.fracsec, 24)
    tq = _check_uint("time_quality", frame.time_quality, 4)
    stat = _check_uint("stat", frame.stat, 16)
    digital = _check_uint("digital", frame.digital, 16)
    if len(frame.phasors) != N_PHASORS:
        raise FrameEncodeError("phasors", f"expected {N_PHASORS} phasors, got {len(frame.phasors)}")
    ph = []
    for i, p in enumerate(frame.phasors):
        p = complex(p)
        ph.append(_check_float(f"phasors[{i}].real", p.real))
        ph.append(_check_float(f"phasors[{i}].imag", p.imag))
    body = _BODY.pack(
        SYNC,
        FRAME_SIZE,
        idc,
        soc,
        (tq << 24) | frac,
        stat,
        *ph,
        _check_float("freq", frame.freq),
        _check_float("dfreq", frame.dfreq),
        _check_float("analog", frame.analog),
        digital,
    )
    return body + struct.pack(">H", crc_ccitt(body))


def decode(data: bytes) -> DataFrame:
    data = bytes(data)
    if len(data) != FRAME_SIZE:
        raise FrameLengthError(f"data frame must be {FRAME_SIZE} bytes, got {len(data)}")
    body, (chk,) = data[:-2], struct.unpack(">H", data[-2:])
    # CRC first: any corrupted byte, sync included, reports as a checksum failure
    if crc_ccitt(body) != chk:
        raise FrameCrcError(f"CRC mismatch: computed 0x{crc_ccitt(body):04X}, frame says 0x{chk:04X}")
    fields = _BODY.unpack(body)
    sync, size, idc, soc, frac_word, stat = fields[:6]
    if sync != SYNC:
        raise FrameSyncError(f"bad sync word 0x{sync:04X}")
    if size != FRAME_SIZE:
        raise FrameSizeError(f"FRAMESIZE field is {size}, expected {FRAME_SIZE}")
    if frac_word >> 28:
        raise FrameFieldError("reserved FRACSEC bits 28-31 are set")
    ph = fields[6 : 6 + 2 * N_PHASORS]
    freq, dfreq, analog, digital = fields[6 + 2 * N_PHASORS :]
    return DataFrame(
        id_code=idc,
        soc=soc,
        fracsec=frac_word & (TIME_BASE - 1),
        time_quality=(frac_word >> 24) & 0xF,
        stat=stat,
        phasors=tuple(complex(ph[2 * i], ph[2 * i + 1]) for i in range(N_PHASORS)),
        freq=freq,
        dfreq=dfreq,
        analog=analog,
        digital=digital,
    )


def split_timestamp(t: float) -> tuple[int, int]:
    """(soc, fracsec) for a time in seconds, fraction on a 2**24 time base."""
    soc = int(t // 1)
    frac = int(round((t - soc) * TIME_BASE))
    if frac >= TIME_BASE:
        soc, frac = soc + 1, 0
    return soc, frac

"""
Dataset and image file formats.

``.rtk`` k-space files::

    uint32 LE   header length L
    L bytes     UTF-8 ``key=value`` lines (version, N, J_physical, K, U, frames,
                slices, mode, samples_per_spoke, base_angle)
    payload     complex64 little-endian, ordered frame -> slice -> channel
                -> spoke -> sample

``.rti`` image files are raw little-endian float32 rows, N x N per image,
with a ``.rti.idx`` sidecar of ``frame_index<TAB>slice_id<TAB>kind<TAB>offset``
lines after a ``# N=<side>`` line.
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Dict, Iterator, List, Optional, TextIO, Union

import numpy as np

from .config import ImageKind, ImagingMode
from .errors import (
    ConfigurationError,
    ContractViolation,
    DataError,
    ImageWriteError,
    NonFiniteDataError,
    OrderingError,
    TruncatedFrameError,
)
from .seqsim import KSpaceFrame, TrajectorySpec, acquisition_turn, frame_angles

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
SAMPLE_DTYPE = np.dtype("<c8")
PIXEL_DTYPE = np.dtype("<f4")
_LENGTH = struct.Struct("<I")


@dataclass(frozen=True)
class DatasetHeader:
    """Self-describing header of a ``.rtk`` dataset."""

    image_size: int
    channels: int
    spokes: int
    turns: int
    frames: int
    slices: int = 1
    mode: ImagingMode = ImagingMode.SINGLE_SLICE
    samples_per_spoke: int = 0
    base_angle: float = 0.0
    version: int = FORMAT_VERSION

    def __post_init__(self) -> None:
        if self.samples_per_spoke == 0:
            object.__setattr__(self, "samples_per_spoke", 2 * self.image_size)
        counts = {
            "N": self.image_size,
            "J_physical": self.channels,
            "K": self.spokes,
            "U": self.turns,
            "frames": self.frames,
            "slices": self.slices,
            "samples_per_spoke": self.samples_per_spoke,
        }
        bad = [k for k, v in counts.items() if v < 1]
        if bad:
            raise DataError(f"header counts must be >= 1: {bad}")
        if self.mode is ImagingMode.FLOW and self.frames % 2:
            raise DataError(f"flow datasets need an even frame count, got {self.frames}")
        if self.mode is not ImagingMode.MULTI_SLICE and self.slices != 1:
            raise DataError(f"{self.mode.value} datasets have exactly one slice")

    @property
    def trajectory(self) -> TrajectorySpec:
        return TrajectorySpec(self.spokes, self.turns, self.samples_per_spoke, self.base_angle)

    @property
    def frame_shape(self):
        return (self.channels, self.spokes, self.samples_per_spoke)

    @property
    def frame_nbytes(self) -> int:
        return int(np.prod(self.frame_shape)) * SAMPLE_DTYPE.itemsize

    def to_text(self) -> str:
        fields = [
            ("version", str(self.version)),
            ("N", str(self.image_size)),
            ("J_physical", str(self.channels)),
            ("K", str(self.spokes)),
            ("U", str(self.turns)),
            ("frames", str(self.frames)),
            ("slices", str(self.slices)),
            ("mode", self.mode.value),
            ("samples_per_spoke", str(self.samples_per_spoke)),
            ("base_angle", repr(float(self.base_angle))),
        ]
        return "".join(f"{k}={v}\n" for k, v in fields)

    @classmethod
    def from_text(cls, text: str) -> "DatasetHeader":
        values: Dict[str, str] = {}
        for line in text.splitlines():
            if line.strip():
                key, sep, value = line.partition("=")
                if not sep:
                    raise DataError(f"malformed header line {line!r}")
                values[key.strip()] = value.strip()
        try:
            version = int(values["version"])
            if version != FORMAT_VERSION:
                raise DataError(f"unsupported dataset version {version}")
            return cls(
                image_size=int(values["N"]),
                channels=int(values["J_physical"]),
                spokes=int(values["K"]),
                turns=int(values["U"]),
                frames=int(values["frames"]),
                slices=int(values["slices"]),
                mode=ImagingMode(values["mode"]),
                samples_per_spoke=int(values["samples_per_spoke"]),
                base_angle=float(values["base_angle"]),
                version=version,
            )
        except KeyError as exc:
            raise DataError(f"header is missing {exc.args[0]!r}") from exc
        except ValueError as exc:
            raise DataError(f"invalid header value: {exc}") from exc


def write_header(stream: BinaryIO, header: DatasetHeader) -> None:
    blob = header.to_text().encode("utf-8")
    stream.write(_LENGTH.pack(len(blob)))
    stream.write(blob)


def read_header(stream: BinaryIO) -> DatasetHeader:
    prefix = stream.read(_LENGTH.size)
    if len(prefix) != _LENGTH.size:
        raise TruncatedFrameError(_LENGTH.size, len(prefix))
    (length,) = _LENGTH.unpack(prefix)
    blob = stream.read(length)
    if len(blob) != length:
        raise TruncatedFrameError(length, len(blob))
    try:
        return DatasetHeader.from_text(blob.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise DataError(f"header is not UTF-8: {exc}") from exc


def write_frame(stream: BinaryIO, header: DatasetHeader, frame: KSpaceFrame) -> None:
    if frame.samples.shape != header.frame_shape:
        raise ContractViolation(f"frame shape {frame.samples.shape} != {header.frame_shape}")
    stream.write(np.ascontiguousarray(frame.samples, dtype=SAMPLE_DTYPE).tobytes())


def read_frame(
    stream: BinaryIO, header: DatasetHeader, frame_index: int, slice_id: int = 0
) -> Optional[KSpaceFrame]:
    """
    Read the next frame from a stream positioned at a frame boundary.

    Returns None at a clean end of stream.
    """
    nbytes = header.frame_nbytes
    blob = stream.read(nbytes)
    if not blob:
        return None
    if len(blob) != nbytes:
        raise TruncatedFrameError(nbytes, len(blob), frame_index)
    samples = np.frombuffer(blob, dtype=SAMPLE_DTYPE).reshape(header.frame_shape)
    if not np.all(np.isfinite(samples)):
        raise NonFiniteDataError(f"frame {frame_index} slice {slice_id}: non-finite samples")
    angles = frame_angles(header.trajectory, acquisition_turn(frame_index, header.mode))
    return KSpaceFrame(frame_index, slice_id, samples.astype(np.complex64), angles)


class KSpaceReader:
    """Streaming reader; holds at most one frame's bytes at a time."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        try:
            self._fh: BinaryIO = open(self.path, "rb")
        except OSError as exc:
            raise DataError(f"cannot open dataset {self.path}: {exc}") from exc
        try:
            self.header = read_header(self._fh)
        except Exception:
            self._fh.close()
            raise
        self._position = 0
        self.max_read_bytes = 0

    def read_frame(self) -> Optional[KSpaceFrame]:
        if self._position >= self.header.frames * self.header.slices:
            return None
        n, s = divmod(self._position, self.header.slices)
        frame = read_frame(self._fh, self.header, n, s)
        self.max_read_bytes = max(self.max_read_bytes, self.header.frame_nbytes)
        if frame is None:
            raise TruncatedFrameError(self.header.frame_nbytes, 0, n)
        self._position += 1
        return frame

    def __iter__(self) -> Iterator[KSpaceFrame]:
        while True:
            frame = self.read_frame()
            if frame is None:
                return
            yield frame

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "KSpaceReader":
        return self

    def __exit__(self, exc_type, exc_val, exc_tb) -> None:
        self.close()


class KSpaceWriter:
    def __init__(self, path: Union[str, Path], header: DatasetHeader):
        self.path = Path(path)
        self.header = header
        self._fh: BinaryIO = open(self.path, "wb")
        write_header(self._fh, header)

    def write_frame(self, frame: KSpaceFrame) -> None:
        write_frame(self._fh, self.header, frame)

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "KSpaceWriter":
        return self

    def __exit__(self, exc_type, exc_val, exc_tb) -> None:
        self.close()


@dataclass
class ImageOut:
    frame_index: int
    slice_id: int
    pixels: np.ndarray
    kind: ImageKind = ImageKind.MAGNITUDE

    def __post_init__(self) -> None:
        if self.pixels.ndim != 2 or self.pixels.shape[0] != self.pixels.shape[1]:
            raise ContractViolation(f"image must be N x N, got {self.pixels.shape}")


def index_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_suffix(path.suffix + ".idx")


class ImageWriter:
    """
    Datasink for ``.rti`` files.

    Args:
        path: Output image file
        image_size: N; every image must be N x N
        strict_order: Reject non-increasing frame indices within a slice
    """

    def __init__(self, path: Union[str, Path], image_size: int, strict_order: bool = True):
        self.path = Path(path)
        self.image_size = image_size
        self.strict_order = strict_order
        self._last: Dict[int, int] = {}
        self._offset = 0
        self.records = 0
        try:
            self._data: BinaryIO = open(self.path, "wb")
            self._index: TextIO = open(index_path(self.path), "w", encoding="utf-8")
            self._index.write(f"# N={image_size}\n")
        except OSError as exc:
            raise ImageWriteError(-1, f"cannot open {self.path}: {exc}") from exc

    def write_image(self, img: ImageOut) -> None:
        if img.pixels.shape != (self.image_size, self.image_size):
            raise ContractViolation(
                f"frame {img.frame_index}: image {img.pixels.shape} is not {self.image_size}^2"
            )
        last = self._last.get(img.slice_id)
        if self.strict_order and last is not None and img.frame_index <= last:
            raise OrderingError(
                f"slice {img.slice_id}: frame {img.frame_index} written after {last}"
            )
        blob = np.ascontiguousarray(img.pixels, dtype=PIXEL_DTYPE).tobytes()
        try:
            self._data.write(blob)
            self._index.write(
                f"{img.frame_index}\t{img.slice_id}\t{img.kind.value}\t{self._offset}\n"
            )
        except OSError as exc:
            raise ImageWriteError(img.frame_index, str(exc)) from exc
        self._last[img.slice_id] = img.frame_index
        self._offset += len(blob)
        self.records += 1

    def close(self) -> None:
        try:
            self._data.close()
            self._index.close()
        except OSError as exc:
            raise ImageWriteError(-1, f"closing {self.path}: {exc}") from exc

    def __enter__(self) -> "ImageWriter":
        return self

    def __exit__(self, exc_type, exc_val, exc_tb) -> None:
        self.close()


def read_images(path: Union[str, Path]) -> List[ImageOut]:
    """Load every image of an ``.rti`` file via its index sidecar."""
    path = Path(path)
    try:
        lines = index_path(path).read_text(encoding="utf-8").splitlines()
        payload = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read images {path}: {exc}") from exc
    if not lines or not lines[0].startswith("# N="):
        raise DataError(f"{index_path(path)}: missing '# N=' line")
    try:
        N = int(lines[0][4:])
    except ValueError as exc:
        raise ConfigurationError(f"bad image side in {index_path(path)}") from exc
    nbytes = N * N * PIXEL_DTYPE.itemsize
    images = []
    for line in lines[1:]:
        if not line.strip():
            continue
        frame, slice_id, kind, offset = line.split("\t")
        start = int(offset)
        if start + nbytes > len(payload):
            raise TruncatedFrameError(nbytes, len(payload) - start, int(frame))
        pixels = np.frombuffer(payload, dtype=PIXEL_DTYPE, count=N * N, offset=start)
        images.append(ImageOut(int(frame), int(slice_id), pixels.reshape(N, N).copy(), ImageKind(kind)))
    return images

"""
Five-stage real-time reconstruction pipeline.

    src -> pre -> rec -> pst -> snk

Each stage is an actor: one thread reading a bounded mailbox. The rec stage
fans frames out to the temporal scheduler's reconstruction threads and a
re-sequencer restores acquisition order before postprocessing.
"""

import logging
import queue
import statistics
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import (
    Any,
    Callable,
    Dict,
    Hashable,
    Iterable,
    List,
    Optional,
    Sequence,
    Tuple,
)

import numpy as np

from .config import ImageKind, ImagingMode
from .decomp import FrameContext, TemporalSchedule, TemporalScheduler
from .errors import PairingError, PipelineFailure
from .fftops import FFT_COUNTER
from .ingest import ImageOut, ImageWriter, KSpaceReader
from .nlinv import FrameResult, data_scale_factor, reconstruct_frame
from .planner import ReconPlan
from .preproc import CompressionMatrix, PreprocessedFrame, Preprocessor, PsfCache

logger = logging.getLogger(__name__)

STAGES = ("src", "pre", "rec", "pst", "snk")


@dataclass
class StageMessage:
    """One frame travelling through the pipeline; owned by one stage at a time."""

    frame_index: int
    slice_id: int
    payload: Any
    stamps: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    scale: float = 1.0
    # acquisition frames this message stands for (2 for a flow pair)
    sources: int = 1

    def stamp(self, stage: str, start: float) -> None:
        self.stamps[stage] = (start, time.perf_counter())


_END = object()

ChainOf = Callable[[StageMessage], Tuple[Hashable, int]]


def chain_for(mode: ImagingMode) -> ChainOf:
    """Temporal chain key and chain-local index of a message."""
    if mode is ImagingMode.FLOW:
        return lambda msg: ((msg.slice_id, msg.frame_index % 2), msg.frame_index // 2)
    return lambda msg: ((msg.slice_id, 0), msg.frame_index)


def phase_difference(even: np.ndarray, odd: np.ndarray) -> np.ndarray:
    """arg(rho_even * conj(rho_odd)); a pair (rho, rho * exp(i theta)) gives -theta."""
    return np.angle(even * np.conj(odd)).astype(np.float32)


def median3(previous: np.ndarray, current: np.ndarray, following: np.ndarray) -> np.ndarray:
    return np.median(np.stack([previous, current, following]), axis=0).astype(np.float32)


def _image_of(msg: StageMessage) -> np.ndarray:
    return msg.payload.image if isinstance(msg.payload, FrameResult) else msg.payload


class Postprocessor:
    """
    Streaming postprocessing: magnitude images, or flow phase differences.

    The optional temporal median-of-3 runs per slice on magnitude images; the
    first and last frame of a slice pass through unfiltered.
    """

    def __init__(self, mode: ImagingMode, median_filter: bool = False):
        self.mode = mode
        self.median_filter = median_filter
        self._pending: Dict[int, StageMessage] = {}
        self._window: Dict[int, List[Tuple[StageMessage, np.ndarray]]] = defaultdict(list)
        self._emitted: Dict[int, int] = defaultdict(int)

    def holdback(self, slices: int) -> int:
        """Most frames held at once: one flow partner or two median neighbours per slice."""
        if self.mode is ImagingMode.FLOW:
            return slices
        return 2 * slices if self.median_filter else 0

    def push(self, msg: StageMessage) -> List[StageMessage]:
        image = _image_of(msg)
        if self.mode is ImagingMode.FLOW:
            return self._pair(msg, image)
        magnitude = np.abs(image).astype(np.float32)
        if not self.median_filter:
            return [self._emit(msg, magnitude, ImageKind.MAGNITUDE)]

        window = self._window[msg.slice_id]
        window.append((msg, magnitude))
        out = []
        if len(window) == 2 and self._emitted[msg.slice_id] == 0:
            out.append(self._emit(*window[0], ImageKind.MAGNITUDE))
        if len(window) == 3:
            middle = median3(window[0][1], window[1][1], window[2][1])
            out.append(self._emit(window[1][0], middle, ImageKind.MAGNITUDE))
            window.pop(0)
        return out

    def flush(self) -> List[StageMessage]:
        """Emit what the median window still holds; unpaired flow frames are an error."""
        if self._pending:
            raise PairingError(f"unpaired flow frame in slices {sorted(self._pending)}")
        out = []
        for slice_id, window in sorted(self._window.items()):
            tail = window if self._emitted[slice_id] == 0 else window[-1:]
            out.extend(self._emit(m, img, ImageKind.MAGNITUDE) for m, img in tail)
            window.clear()
        return out

    def _pair(self, msg: StageMessage, image: np.ndarray) -> List[StageMessage]:
        if msg.frame_index % 2 == 0:
            if msg.slice_id in self._pending:
                raise PairingError(f"frame {msg.frame_index}: previous pair is incomplete")
            self._pending[msg.slice_id] = msg
            return []
        even = self._pending.pop(msg.slice_id, None)
        if even is None or even.frame_index != msg.frame_index - 1:
            raise PairingError(f"frame {msg.frame_index} has no flow-encoded partner")
        delta = phase_difference(_image_of(even), image)
        pair = StageMessage(msg.frame_index // 2, msg.slice_id, None, dict(msg.stamps), msg.scale, 2)
        if "src" in even.stamps:
            pair.stamps["src"] = even.stamps["src"]
        return [self._emit(pair, delta, ImageKind.PHASE_DIFFERENCE)]

    def _emit(self, msg: StageMessage, pixels: np.ndarray, kind: ImageKind) -> StageMessage:
        self._emitted[msg.slice_id] += 1
        msg.payload = ImageOut(msg.frame_index, msg.slice_id, pixels, kind)
        return msg


def postprocess(
    images: Sequence[np.ndarray],
    mode: ImagingMode,
    median_filter: bool = False,
    slice_id: int = 0,
) -> List[ImageOut]:
    """Postprocess a whole series of reconstructed (cropped) images of one slice."""
    if mode is ImagingMode.FLOW and len(images) % 2:
        raise PairingError(f"flow series with odd frame count {len(images)}")
    post = Postprocessor(mode, median_filter)
    out: List[StageMessage] = []
    for n, image in enumerate(images):
        out.extend(post.push(StageMessage(n, slice_id, image)))
    out.extend(post.flush())
    return [m.payload for m in out]


class PreStage:
    """
    Preprocessing actor state: channel compression, gridding, data scaling.

    With ``virtual_channels`` set, the first ``calibration_frames`` frames are
    held back until the compression matrix is calibrated on them.
    """

    def __init__(
        self,
        preprocessor: Preprocessor,
        chain_of: ChainOf,
        virtual_channels: Optional[int] = None,
        calibration_frames: int = 4,
    ):
        self.preprocessor = preprocessor
        self.chain_of = chain_of
        self.virtual_channels = virtual_channels
        self.calibration_frames = calibration_frames
        self.scales: Dict[Hashable, float] = {}
        self._held: List[StageMessage] = []

    @property
    def holdback(self) -> int:
        return self.calibration_frames if self.virtual_channels else 0

    @property
    def calibrated(self) -> bool:
        return self.virtual_channels is None or self.preprocessor.compression is not None

    def push(self, msg: StageMessage) -> List[StageMessage]:
        if self.calibrated:
            return [self._process(msg)]
        self._held.append(msg)
        if len(self._held) < self.calibration_frames:
            return []
        return self._release()

    def flush(self) -> List[StageMessage]:
        return self._release() if self._held else []

    def _release(self) -> List[StageMessage]:
        compression = self.preprocessor.calibrate(
            [m.payload for m in self._held], self.virtual_channels  # type: ignore[arg-type]
        )
        logger.debug(
            f"compression {compression.physical_channels}->{compression.virtual_channels} "
            f"channels keeps {compression.energy_fraction:.4f} of the energy"
        )
        held, self._held = self._held, []
        return [self._process(m) for m in held]

    def _process(self, msg: StageMessage) -> StageMessage:
        pre = self.preprocessor.process(msg.payload)
        chain, _ = self.chain_of(msg)
        if chain not in self.scales:
            self.scales[chain] = data_scale_factor(pre.data.z, self.preprocessor.plan)
            logger.debug(f"chain {chain}: data scale {self.scales[chain]:.4g}")
        msg.payload = pre
        msg.scale = self.scales[chain]
        return msg


@dataclass
class PipelineSummary:
    frames: int = 0
    images: int = 0
    seconds: float = 0.0
    stage_ms: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    latency_ms: float = 0.0
    sink_times: List[float] = field(default_factory=list)
    max_in_flight: int = 0
    in_flight_bound: int = 0
    cg_iterations: int = 0
    fft_counts: Dict[str, int] = field(default_factory=dict)
    audit: List[str] = field(default_factory=list)
    prologue_ticks: int = len(STAGES) - 1
    epilogue_ticks: int = len(STAGES) - 1

    @property
    def fps(self) -> float:
        return self.frames / self.seconds if self.seconds > 0 else 0.0

    def frame_intervals(self) -> List[float]:
        return [b - a for a, b in zip(self.sink_times, self.sink_times[1:])]

    def steady_state_interval(self, skip: int = len(STAGES) - 1) -> float:
        """Median sink interval in seconds, without prologue and epilogue frames."""
        intervals = self.frame_intervals()
        core = intervals[skip : len(intervals) - skip] or intervals
        return statistics.median(core) if core else 0.0

    def to_text(self) -> str:
        lines = [
            f"frames: {self.frames}",
            f"images: {self.images}",
            f"fps: {self.fps:.2f}",
            f"latency_ms: {self.latency_ms:.2f}",
            f"prologue_ticks: {self.prologue_ticks}",
            f"epilogue_ticks: {self.epilogue_ticks}",
        ]
        for stage in STAGES:
            if stage in self.stage_ms:
                mean, worst = self.stage_ms[stage]
                lines.append(f"{stage}: mean {mean:.2f} ms, max {worst:.2f} ms")
        return "\n".join(lines)


class Pipeline:
    """
    Generic five-stage actor pipeline.

    Args:
        source: Iterable of (frame_index, slice_id, payload) in acquisition order
        preprocess: pre stage; one message in, zero or more messages out
        reconstruct: Runs on the scheduler threads as reconstruct(msg, ctx) and
            returns (message, estimate)
        postprocess: pst stage; one message in, zero or more messages out
        sink: snk stage; consumes one message
        schedule: Temporal schedule of the rec stage
        chain_of: Maps a message to (chain key, chain-local index)
        threads: Reconstruction threads T
        workers: Compute workers per thread A
        queue_capacity: Mailbox size of every stage
        pre_flush: Called on the pre stage at end of stream
        post_flush: Called on the pst stage at end of stream
        holdback: Frames the pre stage may hold back
        post_holdback: Frames the pst stage may hold back
    """

    def __init__(
        self,
        source: Iterable[Tuple[int, int, Any]],
        preprocess: Callable[[StageMessage], List[StageMessage]],
        reconstruct: Callable[[StageMessage, FrameContext], Tuple[StageMessage, Any]],
        postprocess: Callable[[StageMessage], List[StageMessage]],
        sink: Callable[[StageMessage], None],
        schedule: TemporalSchedule,
        chain_of: ChainOf = chain_for(ImagingMode.SINGLE_SLICE),
        threads: int = 1,
        workers: int = 1,
        queue_capacity: int = 4,
        pre_flush: Optional[Callable[[], List[StageMessage]]] = None,
        post_flush: Optional[Callable[[], List[StageMessage]]] = None,
        holdback: int = 0,
        post_holdback: int = 0,
    ):
        self.source = source
        self.preprocess = preprocess
        self.reconstruct = reconstruct
        self.postprocess = postprocess
        self.sink = sink
        self.schedule = schedule
        self.chain_of = chain_of
        self.threads = threads
        self.workers = workers
        self.queue_capacity = queue_capacity
        self.pre_flush = pre_flush
        self.post_flush = post_flush
        self.holdback = holdback
        self.post_holdback = post_holdback

        self._mailboxes: Dict[str, "queue.Queue[Any]"] = {
            s: queue.Queue(maxsize=queue_capacity) for s in STAGES[1:]
        }
        # one ticket per submitted frame, then _END
        self._tickets: "queue.Queue[Any]" = queue.Queue()
        self._slots = threading.Semaphore(threads + queue_capacity)
        self._admission = threading.Semaphore(self.in_flight_bound)
        self._stop = threading.Event()
        self._lock = threading.Lock()
        self._failure: Optional[Tuple[str, BaseException]] = None
        self._in_flight = 0
        self.max_in_flight = 0
        self._last_good: Optional[int] = None
        self._written: List[StageMessage] = []
        self._sink_times: List[float] = []
        self._scheduler: Optional[TemporalScheduler] = None

    @property
    def in_flight_bound(self) -> int:
        """
        Frames admitted between src and snk: one per stage, T in reconstruction,
        one mailbox of slack, plus what pre and pst deliberately hold back.
        """
        return (
            len(STAGES) + self.threads + self.queue_capacity + self.holdback + self.post_holdback
        )

    def _put(self, stage: str, item: Any) -> bool:
        box = self._mailboxes[stage]
        while not self._stop.is_set():
            try:
                box.put(item, timeout=0.05)
                return True
            except queue.Full:
                continue
        return False

    def _get(self, stage: str) -> Any:
        box = self._mailboxes[stage]
        while not self._stop.is_set():
            try:
                return box.get(timeout=0.05)
            except queue.Empty:
                continue
        return _END

    def _fail(self, stage: str, exc: BaseException) -> None:
        with self._lock:
            if self._failure is None:
                self._failure = (stage, exc)
                logger.debug(f"stage {stage} failed, draining: {exc!r}")
        self._stop.set()

    def _src(self) -> None:
        try:
            for frame_index, slice_id, payload in self.source:
                # released by snk once the frame is written
                while not self._admission.acquire(timeout=0.05):
                    if self._stop.is_set():
                        return
                start = time.perf_counter()
                msg = StageMessage(frame_index, slice_id, payload)
                msg.stamp("src", start)
                with self._lock:
                    self._in_flight += 1
                    self.max_in_flight = max(self.max_in_flight, self._in_flight)
                if not self._put("pre", msg):
                    return
        except BaseException as exc:
            self._fail("src", exc)
        finally:
            self._put("pre", _END)

    def _stage(
        self,
        stage: str,
        fn: Callable[[StageMessage], List[StageMessage]],
        flush: Optional[Callable[[], List[StageMessage]]],
        target: str,
    ) -> None:
        logger.debug(f"stage {stage} started")
        try:
            while True:
                msg = self._get(stage)
                if msg is _END:
                    break
                start = time.perf_counter()
                for out in fn(msg):
                    out.stamp(stage, start)
                    if not self._put(target, out):
                        return
            if flush is not None and not self._stop.is_set():
                start = time.perf_counter()
                for out in flush():
                    out.stamp(stage, start)
                    if not self._put(target, out):
                        return
        except BaseException as exc:
            self._fail(stage, exc)
        finally:
            self._put(target, _END)
            logger.debug(f"stage {stage} stopped")

    def _dispatch(self) -> None:
        assert self._scheduler is not None
        try:
            while True:
                msg = self._get("rec")
                if msg is _END:
                    break
                while not self._slots.acquire(timeout=0.05):
                    if self._stop.is_set():
                        return
                chain, index = self.chain_of(msg)
                self._scheduler.submit(chain, index, msg)
                self._tickets.put(True)
        except BaseException as exc:
            self._fail("rec", exc)
        finally:
            self._tickets.put(_END)

    def _resequence(self) -> None:
        assert self._scheduler is not None
        try:
            while not self._stop.is_set():
                try:
                    ticket = self._tickets.get(timeout=0.05)
                except queue.Empty:
                    continue
                if ticket is _END:
                    break
                # a ticket guarantees the next result arrives
                _, _, msg = self._scheduler.next_result()
                self._slots.release()
                if not self._put("pst", msg):
                    return
        except BaseException as exc:
            self._fail("rec", exc)
        finally:
            self._put("pst", _END)

    def _snk(self) -> None:
        try:
            while True:
                msg = self._get("snk")
                if msg is _END:
                    break
                start = time.perf_counter()
                self.sink(msg)
                msg.stamp("snk", start)
                self._sink_times.append(time.perf_counter())
                self._written.append(msg)
                self._last_good = msg.frame_index
                with self._lock:
                    self._in_flight -= msg.sources
                for _ in range(msg.sources):
                    self._admission.release()
        except BaseException as exc:
            self._fail("snk", exc)

    def _reconstruct(self, msg: StageMessage, ctx: FrameContext) -> Tuple[StageMessage, Any]:
        start = time.perf_counter()
        out, estimate = self.reconstruct(msg, ctx)
        out.stamp("rec", start)
        return out, estimate

    def run(self) -> PipelineSummary:
        """Push every frame through all stages; raises PipelineFailure after draining."""
        started = time.perf_counter()
        self._scheduler = TemporalScheduler(
            self._reconstruct, self.schedule, threads=self.threads, workers=self.workers
        )
        actors = [
            threading.Thread(target=self._src, name="rtnlinv-src"),
            threading.Thread(
                target=self._stage,
                args=("pre", self.preprocess, self.pre_flush, "rec"),
                name="rtnlinv-pre",
            ),
            threading.Thread(target=self._dispatch, name="rtnlinv-rec"),
            threading.Thread(target=self._resequence, name="rtnlinv-reseq"),
            threading.Thread(
                target=self._stage,
                args=("pst", self.postprocess, self.post_flush, "snk"),
                name="rtnlinv-pst",
            ),
            threading.Thread(target=self._snk, name="rtnlinv-snk"),
        ]
        with self._scheduler:
            for actor in actors:
                actor.start()
            for actor in actors:
                actor.join()
        if self._failure is not None:
            stage, cause = self._failure
            raise PipelineFailure(stage, self._last_good, cause) from cause
        return self._summarize(time.perf_counter() - started)

    def _summarize(self, seconds: float) -> PipelineSummary:
        per_stage: Dict[str, List[float]] = defaultdict(list)
        latencies = []
        for msg in self._written:
            for stage, (a, b) in msg.stamps.items():
                per_stage[stage].append((b - a) * 1e3)
            if "src" in msg.stamps and "snk" in msg.stamps:
                latencies.append((msg.stamps["snk"][1] - msg.stamps["src"][0]) * 1e3)
        ledgers = self._scheduler.ledgers if self._scheduler is not None else {}
        return PipelineSummary(
            frames=sum(m.sources for m in self._written),
            images=len(self._written),
            seconds=seconds,
            stage_ms={s: (float(np.mean(v)), float(np.max(v))) for s, v in per_stage.items()},
            latency_ms=float(np.mean(latencies)) if latencies else 0.0,
            sink_times=list(self._sink_times),
            max_in_flight=self.max_in_flight,
            in_flight_bound=self.in_flight_bound,
            audit=[line for key in sorted(ledgers, key=repr) for line in ledgers[key].audit],
        )


@dataclass(frozen=True)
class PipelineModel:
    """
    Simulated-clock model of the pipeline.

    Every stage works on one frame at a time, except stages listed in
    ``servers``, which run that many frames concurrently and still deliver in
    order.
    """

    stage_costs: Tuple[float, ...] = (1.0,) * len(STAGES)
    servers: Dict[int, int] = field(default_factory=dict)

    def finish_times(self, frames: int) -> np.ndarray:
        done = np.zeros((frames, len(self.stage_costs)))
        for i in range(frames):
            for s, cost in enumerate(self.stage_costs):
                r = self.servers.get(s, 1)
                ready = done[i, s - 1] if s > 0 else 0.0
                free = done[i - r, s] if i >= r else 0.0
                done[i, s] = max(ready, free) + cost
                if i > 0:
                    done[i, s] = max(done[i, s], done[i - 1, s])
        return done

    def makespan(self, frames: int) -> float:
        return float(self.finish_times(frames)[-1, -1]) if frames else 0.0

    def latency(self, frames: int) -> List[float]:
        """Per-frame time from entering src to leaving snk."""
        done = self.finish_times(frames)
        return [float(done[i, -1] - (done[i, 0] - self.stage_costs[0])) for i in range(frames)]

    def throughput(self) -> float:
        """Steady-state frames per time unit, set by the slowest stage."""
        return min(self.servers.get(s, 1) / c for s, c in enumerate(self.stage_costs))


def run_pipeline(
    reader: KSpaceReader,
    writer: ImageWriter,
    plan: ReconPlan,
    threads: int = 1,
    workers: int = 1,
    queue_capacity: int = 4,
    median_filter: bool = False,
    virtual_channels: Optional[int] = None,
    schedule: Optional[TemporalSchedule] = None,
    cache: Optional[PsfCache] = None,
    compression: Optional[CompressionMatrix] = None,
    calibration_frames: int = 4,
) -> PipelineSummary:
    """
    Reconstruct a dataset end to end and write its images.

    Args:
        reader: Open k-space dataset
        writer: Open image sink
        plan: Grid and solver plan
        threads: Reconstruction threads T
        workers: Compute workers per thread A
        queue_capacity: Mailbox size of every stage
        median_filter: Temporal median-of-3 on magnitude images
        virtual_channels: Compress to this many channels, calibrated on the
            first ``calibration_frames`` frames
        schedule: Temporal schedule; defaults to prefix U and lookback ceil(U/2)
        cache: PSF and gridder cache shared across runs
        compression: Precomputed compression matrix; overrides virtual_channels

    Returns:
        Run statistics
    """
    header = reader.header
    chain_of = chain_for(header.mode)
    schedule = schedule or TemporalSchedule.for_turns(header.turns, plan.newton_steps)
    pre = PreStage(
        Preprocessor(plan, compression, cache),
        chain_of,
        None if compression is not None else virtual_channels,
        calibration_frames,
    )
    post = Postprocessor(header.mode, median_filter)
    cg_lock = threading.Lock()
    cg_total = [0]

    def reconstruct(msg: StageMessage, ctx: FrameContext) -> Tuple[StageMessage, Any]:
        prepared: PreprocessedFrame = msg.payload
        result = reconstruct_frame(
            prepared.data.z,
            prepared.psf,
            plan,
            x_reg=ctx.estimate_for_step,
            group=ctx.workers,
            scale=msg.scale,
            frame_index=msg.frame_index,
        )
        result.sources = dict(ctx.used)
        with cg_lock:
            cg_total[0] += sum(result.cg_iterations)
        logger.debug(
            f"frame {msg.frame_index} slice {msg.slice_id}: {result.seconds * 1e3:.1f} ms, "
            f"CG {result.cg_iterations}"
        )
        msg.payload = result
        return msg, result.estimate

    fft_before = FFT_COUNTER.snapshot()
    pipeline = Pipeline(
        source=((f.frame_index, f.slice_id, f) for f in reader),
        preprocess=pre.push,
        reconstruct=reconstruct,
        postprocess=post.push,
        sink=lambda msg: writer.write_image(msg.payload),
        schedule=schedule,
        chain_of=chain_of,
        threads=threads,
        workers=workers,
        queue_capacity=queue_capacity,
        pre_flush=pre.flush,
        post_flush=post.flush,
        holdback=pre.holdback,
        post_holdback=post.holdback(header.slices),
    )
    summary = pipeline.run()
    fft_after = FFT_COUNTER.snapshot()
    summary.fft_counts = {k: v - fft_before.get(k, 0) for k, v in fft_after.items()}
    summary.cg_iterations = cg_total[0]
    logger.debug(
        f"pipeline: {summary.frames} frames in {summary.seconds:.2f}s, "
        f"max in flight {summary.max_in_flight}/{summary.in_flight_bound}"
    )
    return summary

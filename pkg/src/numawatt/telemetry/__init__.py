from .counters import (
    UJ_PER_J,
    check_frame,
    delta_uj_with_overflow,
    delta_with_overflow,
    host_cpu_time_per_socket,
    rapl_deltas,
)
from .frames import (
    DRAM,
    PACKAGE,
    NumaMemReading,
    RaplReading,
    TaskCpuReading,
    TaskId,
    TelemetryFrame,
    Topology,
)
from .live import ALL_JOBS, LiveReader, LiveSource, discover_topology, read_live_frame
from .procfs import parse_cpulist, parse_node_meminfo, parse_numa_maps, parse_proc_stat, parse_task_stat
from .tasks import FrameIndex, enumerate_tasks, job_roots
from .trace import (
    TRACE_VERSION,
    TraceReader,
    TraceWriter,
    decode_frame,
    dumps_trace,
    encode_frame,
    read_trace,
    replay_next_frame,
)

"""
Fine-grained versus coarse attribution on two sockets
=====================================================

One application runs a process on socket 0 and a thread on socket 1.
Over a 100 s window the process uses 30 s of CPU time, the thread 180 s;
the sockets are busy 100 s and 200 s in total and their packages spend
30 J and 50 J of dynamic energy. Splitting each socket's energy by its own
usage gives 54 J; splitting the host total by the host-wide share gives 56 J.
"""

from numawatt.engine import Engine, EngineConfig
from numawatt.telemetry import NumaMemReading, RaplReading, TaskCpuReading, TelemetryFrame, Topology

UJ = 1_000_000

# two sockets of two CPUs, 100 clock ticks per second
topo = Topology.uniform(2, 2, 100)


def frame(ts, pkg_j, busy_ticks, proc_ticks, thread_ticks):
    rapl = []
    for s, j in enumerate(pkg_j):
        rapl.append(RaplReading(s, "package", j * UJ, 262_143_328_850))
        rapl.append(RaplReading(s, "dram", 0, 262_143_328_850))
    tasks = (TaskCpuReading(100, 100, 1, proc_ticks, 0, 0),   # on CPU 0, socket 0
             TaskCpuReading(100, 101, 1, thread_ticks, 0, 2))  # on CPU 2, socket 1
    numa = tuple(NumaMemReading(None, s, 0, 0, 1 << 30) for s in range(2))
    return TelemetryFrame(float(ts), tuple(rapl), tasks, numa, tuple(busy_ticks))


# counters start anywhere; only differences matter
frames = [frame(0, [5, 7], [0, 0], 0, 0),
          frame(100, [35, 57], [10_000, 20_000], 3_000, 18_000)]

# static power is left out so the whole delta is dynamic
engine = Engine(EngineConfig(targets=[100], static_mode="excluded"), topo)
(result,) = list(engine.run(frames))
(rec,) = result.records

for sa in rec.per_socket:
    print(f"socket {sa.socket}: delta {sa.cpu.delta:5.1f} J  credit {sa.cpu.credit:.2f}  "
          f"-> {sa.cpu.dynamic:5.1f} J   (coarse share {sa.cpu.coarse:5.1f} J)")
print(f"fine-grained: {rec.cpu_dynamic:.3f} J")
print(f"coarse:       {rec.coarse_cpu:.3f} J")

# the coarse figure charges socket 0 for work the application did on socket 1

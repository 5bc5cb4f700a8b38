"""A fake /proc and /sys tree for exercising the live reader without hardware."""

from pathlib import Path

MAX_UJ = 262_143_328_850


def stat_line(tid, comm, ppid, utime, stime, cpu, state="R"):
    """A 52-field stat line; everything not read by the parser is filler."""
    after = [state, str(ppid)] + ["0"] * 9 + [str(utime), str(stime)] + ["0"] * 23 + [str(cpu)]
    after += ["0"] * (50 - len(after))
    return f"{tid} ({comm}) " + " ".join(after) + "\n"


class FakeHost:
    def __init__(self, root: Path, sockets=2, cpus_per_socket=2, dram=True, node_kb=32 * 1024 * 1024):
        self.root = Path(root)
        self.sockets = sockets
        self.cpus_per_socket = cpus_per_socket
        self.node_kb = node_kb
        self.cpu_ticks = [0] * (sockets * cpus_per_socket)
        for s in range(sockets):
            zone = self.root / f"sys/class/powercap/intel-rapl:{s}"
            self._write(zone / "name", f"package-{s}\n")
            self._write(zone / "energy_uj", "0\n")
            self._write(zone / "max_energy_range_uj", f"{MAX_UJ}\n")
            if dram:
                sub = zone / f"intel-rapl:{s}:0"
                self._write(sub / "name", "dram\n")
                self._write(sub / "energy_uj", "0\n")
                self._write(sub / "max_energy_range_uj", f"{MAX_UJ}\n")
            node = self.root / f"sys/devices/system/node/node{s}"
            lo = s * cpus_per_socket
            self._write(node / "cpulist", f"{lo}-{lo + cpus_per_socket - 1}\n")
            self.set_meminfo(s, used_kb=node_kb // 2)
        self._write(self.root / "proc/cpuinfo", "processor\t: 0\nmodel name\t: Fake CPU @ 2.40GHz\n")
        self.write_proc_stat()

    @staticmethod
    def _write(path: Path, text: str):
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)

    def set_energy(self, socket, domain, uj):
        zone = self.root / f"sys/class/powercap/intel-rapl:{socket}"
        if domain == "dram":
            zone = zone / f"intel-rapl:{socket}:0"
        self._write(zone / "energy_uj", f"{uj}\n")

    def set_meminfo(self, node, used_kb):
        free = self.node_kb - used_kb
        text = (f"Node {node} MemTotal:       {self.node_kb} kB\n"
                f"Node {node} MemFree:        {free} kB\n"
                f"Node {node} MemUsed:        {used_kb} kB\n")
        self._write(self.root / f"sys/devices/system/node/node{node}/meminfo", text)

    def write_proc_stat(self):
        total = sum(self.cpu_ticks)
        lines = [f"cpu  {total} 0 0 0 0 0 0 0 0 0"]
        for i, t in enumerate(self.cpu_ticks):
            lines.append(f"cpu{i} {t} 0 0 1000 0 0 0 0 0 0")
        lines.append("intr 0")
        self._write(self.root / "proc/stat", "\n".join(lines) + "\n")

    def add_process(self, pid, ppid, comm="proc", threads=(), utime=0, cpu=0, numa_pages=None):
        """``threads`` lists extra tids; ``numa_pages`` is per-node 4 KiB pages."""
        base = self.root / f"proc/{pid}"
        self._write(base / "stat", stat_line(pid, comm, ppid, utime, 0, cpu))
        for tid in (pid,) + tuple(threads):
            self._write(base / f"task/{tid}/stat", stat_line(tid, comm, ppid, utime, 0, cpu))
        if numa_pages is not None:
            nodes = " ".join(f"N{n}={p}" for n, p in enumerate(numa_pages) if p)
            self._write(base / "numa_maps",
                        f"00400000 default file=/bin/{comm} mapped=2 mapmax=3 N0=2 kernelpagesize_kB=4\n"
                        f"01000000 default heap anon={sum(numa_pages)} dirty=1 {nodes} kernelpagesize_kB=4\n")

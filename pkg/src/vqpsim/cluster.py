"""Wiring helper: one fabric, replicated meta servers and a kernel per host."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any, Generator, Optional

from .meta import MetaConfig, MetaServer
from .nic import Nic, NicCostModel
from .simcore import Fabric, FabricConfig, SimClock, make_gid
from .vplane import KernelNode, VPlaneConfig

META_GID_BASE = 60_000


@dataclass
class ClusterConfig:
    hosts: int = 2
    meta_servers: int = 1
    nic: NicCostModel = field(default_factory=NicCostModel)
    fabric: FabricConfig = field(default_factory=FabricConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    vplane: VPlaneConfig = field(default_factory=VPlaneConfig)
    event_budget: Optional[int] = None

    def validate(self) -> None:
        if self.hosts <= 0 or self.meta_servers <= 0:
            raise ValueError("a cluster needs at least one host and one meta server")
        self.nic.validate()
        self.fabric.validate()
        self.meta.validate()
        self.vplane.validate()


class Cluster:
    def __init__(self, config: Optional[ClusterConfig] = None, boot: bool = True):
        self.config = config or ClusterConfig()
        self.config.validate()
        cfg = self.config
        self.clock = SimClock(event_budget=cfg.event_budget)
        self.fabric = Fabric(self.clock, cfg.fabric)
        self.meta_servers = [MetaServer(self.clock, self.fabric, make_gid(META_GID_BASE + i), copy.copy(cfg.meta))
                             for i in range(cfg.meta_servers)]
        self.nics = [Nic(self.clock, self.fabric, make_gid(i), copy.copy(cfg.nic), index=i)
                     for i in range(cfg.hosts)]
        self.nodes = [KernelNode(self.clock, self.fabric, nic, self.meta_servers, copy.copy(cfg.vplane))
                      for nic in self.nics]
        self.boot_time = 0
        if boot:
            self.boot()

    def boot(self) -> int:
        """Boot every kernel in parallel and let metadata broadcasts land."""
        for node in self.nodes:
            self.clock.spawn(node.boot(), f"boot{node.nic.index}")
        self.clock.run_until_idle()
        self.boot_time = self.clock.now
        return self.boot_time

    def run(self, gen: Generator, label: str = "") -> Any:
        return self.clock.call(gen, label)

    def node(self, i: int) -> KernelNode:
        return self.nodes[i]

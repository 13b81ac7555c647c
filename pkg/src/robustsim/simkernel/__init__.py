"""Discrete-event simulation of a synchronous training job under injected faults."""
from robustsim.simkernel.events import EventQueue
from robustsim.simkernel.faults import KINDS, Effect, FaultEvent, Observability
from robustsim.simkernel.ledger import MetricsLedger, Segment, ettr, ettr_at


def run(scenario):
    """Simulate ``scenario`` (a ScenarioConfig) and return its SimReport."""
    from robustsim.simkernel.engine import Simulator

    return Simulator(scenario).run()


__all__ = ["EventQueue", "KINDS", "Effect", "FaultEvent", "Observability", "MetricsLedger",
           "Segment", "ettr", "ettr_at", "run"]

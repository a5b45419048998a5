"""Toolchain and simulator for compartmentalized library operating system images.

The pipeline: parse component specs and configurations, parse a FlexC
program, instantiate it for a configuration, execute the image on the
protection-domain machine and explore the space of configurations.
"""
from .config import (
    CompartmentDecl,
    Hardening,
    ImageConfig,
    Mechanism,
    Sharing,
    config_from_partition,
    config_id,
    enumerate_space,
    format_config,
    parse_config,
    validate_config,
)
from .errors import FlexError, ParseError, Violation
from .explore import (
    Mode,
    ResultsFileProvider,
    SimulatorProvider,
    build_poset,
    dominates,
    explore,
    export_dot,
    safety_vector,
)
from .machine import CostModel, Trace, measure_alloc_latency, measure_gate_latency, run, run_program
from .mspec import check_requires, parse_mspec, serialize_mspec, suggest_partition
from .source import call_graph, format_program, parse_program
from .transform import insert_gate_placeholders, instantiate, layout_report, ungated_image

__version__ = "0.1.0"

__all__ = [
    "CompartmentDecl", "CostModel", "FlexError", "Hardening", "ImageConfig", "Mechanism", "Mode",
    "ParseError", "ResultsFileProvider", "Sharing", "SimulatorProvider", "Trace", "Violation",
    "build_poset", "call_graph", "check_requires", "config_from_partition", "config_id", "dominates",
    "enumerate_space", "explore", "export_dot", "format_config", "format_program",
    "insert_gate_placeholders", "instantiate", "layout_report", "measure_alloc_latency",
    "measure_gate_latency", "parse_config", "parse_mspec", "parse_program", "run", "run_program",
    "safety_vector", "serialize_mspec", "suggest_partition", "ungated_image", "validate_config",
]

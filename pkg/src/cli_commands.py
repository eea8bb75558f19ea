"""
Central registry for CLI subcommands.

Each subcommand is a `Command` holding its name, a one-line description,
a function that adds its flags to an argparse sub-parser, and the handler
that runs it and returns a process exit code.
"""
from __future__ import annotations

import argparse
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

Handler = Callable[[argparse.Namespace], int]
Configure = Callable[[argparse.ArgumentParser], None]


@dataclass(frozen=True, slots=True)
class Command:
    name: str
    description: str
    handler: Handler
    configure: Optional[Configure] = None


# Global registry -------------------------------------------------------------
COMMAND_REGISTRY: Dict[str, Command] = {}


def register(command: Command) -> Command:
    """Register a new command. Raises on duplicates."""
    if command.name in COMMAND_REGISTRY:
        raise ValueError(f"Duplicate CLI command registered: {command.name}")
    COMMAND_REGISTRY[command.name] = command
    return command


def get(name: str) -> Optional[Command]:
    """Fetch a command by name or return None."""
    return COMMAND_REGISTRY.get(name)


def names() -> List[str]:
    return sorted(COMMAND_REGISTRY)


def build_parser(prog: str, description: str, common: Configure) -> argparse.ArgumentParser:
    """Top-level parser with one sub-parser per registered command."""
    parser = argparse.ArgumentParser(prog=prog, description=description)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name in names():
        command = COMMAND_REGISTRY[name]
        child = sub.add_parser(name, help=command.description, description=command.description)
        common(child)
        if command.configure is not None:
            command.configure(child)
        child.set_defaults(_handler=command.handler)
    return parser

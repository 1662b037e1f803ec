"""Core domain types for simulated tool-calling pipelines.

A tool is modelled as a triple of input parameters, a registered
deterministic behaviour, and an output schema. Inference produces a trace
with two views: the frontend steps a user would see and the full backend
call chain. The module also provides the two primitive operations the
rest of the package builds on: appending an injected command to a tool
output, and enumerating victim/attacker pairs from a toolchain.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Mapping

from .errors import ChainTooShort, InjectionUnsupported

# Sentinel the malicious tool uses to recognise smuggled values in its
# own inputs. Outputs carry it inside the injected command text; obeying
# agents prefix stolen values with it.
PAYLOAD_MARKER = "$$$%%%@"

# Name of the dedicated output field that carries injected command text.
# Real attacks splice commands into natural text; a dedicated field keeps
# the simulated agent's parsing deterministic and detection rules testable.
CMD_FIELD = "_cmd"

FINISH_ACTION = "Finish"


class ValueKind(str, Enum):
    """Closed vocabulary of parameter/output value types.

    Unknown kinds from scenario files are coerced to ``free_text``.
    ``free_text`` never participates in key-information matching.
    """

    USERNAME = "username"
    PASSWORD = "password"
    LOCATION = "location"
    DATE = "date"
    IDENTIFIER = "identifier"
    FREE_TEXT = "free_text"
    TOKEN = "token"


#: kinds whose values are credentials; always treated as PII.
CREDENTIAL_KINDS = frozenset({ValueKind.USERNAME, ValueKind.PASSWORD, ValueKind.TOKEN})

#: kinds that can act as key information between tools.
#: ``free_text`` is excluded: it carries no identifiable value shape.
KEY_INFO_KINDS = frozenset(k for k in ValueKind if k is not ValueKind.FREE_TEXT)


def coerce_kind(raw: str) -> ValueKind:
    """Map a raw kind string to the closed enum; unknowns become free_text."""
    try:
        return ValueKind(raw)
    except ValueError:
        return ValueKind.FREE_TEXT


# Phrases the simulated agent (and the command grammar) use to name each
# value kind inside command text. Matching is word-boundary based.
KIND_PHRASES: dict[ValueKind, tuple[str, ...]] = {
    ValueKind.USERNAME: ("username", "user name", "login name"),
    ValueKind.PASSWORD: ("password", "passcode"),
    ValueKind.TOKEN: ("token", "api key", "access key"),
    ValueKind.LOCATION: ("location", "address", "place", "destination"),
    ValueKind.DATE: ("travel date", "travel dates", "check-in date"),
    ValueKind.IDENTIFIER: (
        "booking reference",
        "book_result",
        "reservation id",
        "confirmation number",
    ),
}

_PHRASE_PATTERNS = [
    (kind, re.compile(r"(?<![\w])" + re.escape(phrase) + r"(?![\w])", re.IGNORECASE))
    for kind, phrases in KIND_PHRASES.items()
    for phrase in phrases
]


def extract_kind_mentions(text: str) -> frozenset[ValueKind]:
    """Return the value kinds named in a piece of command text."""
    found = {kind for kind, pat in _PHRASE_PATTERNS if pat.search(text)}
    return frozenset(found)


def phrase_for_kind(kind: ValueKind) -> str:
    """Canonical phrase used when rendering a kind into command text."""
    return KIND_PHRASES.get(kind, (kind.value,))[0]


def render_kind_list(kinds) -> str:
    """Render kinds as natural text, e.g. 'username and password'."""
    phrases = [phrase_for_kind(k) for k in sorted(kinds, key=lambda k: k.value)]
    if not phrases:
        return "details"
    if len(phrases) == 1:
        return phrases[0]
    return ", ".join(phrases[:-1]) + " and " + phrases[-1]


@dataclass(frozen=True)
class ToolParam:
    """One declared input parameter of a tool.

    Credential kinds (username/password/token) are always PII: an explicit
    ``pii=False`` on those kinds is normalised to ``True`` at construction.
    """

    name: str
    value_kind: ValueKind = ValueKind.FREE_TEXT
    required: bool = True
    pii: bool = False

    def __post_init__(self):
        if not self.name:
            raise ValueError("parameter name must be nonempty")
        if self.value_kind in CREDENTIAL_KINDS and not self.pii:
            object.__setattr__(self, "pii", True)


@dataclass(frozen=True)
class OutputField:
    """One named output field of a tool."""

    name: str
    description: str = ""
    value_kind: ValueKind = ValueKind.FREE_TEXT

    def __post_init__(self):
        if not self.name:
            raise ValueError("output field name must be nonempty")


@dataclass(frozen=True)
class ToolSpec:
    """A tool as input parameters, a registered behaviour id, and outputs.

    ``function`` names a deterministic simulated behaviour; resolution
    against the registry happens at execution time. ``injected_command``
    is set when the (malicious) tool is armed with a command to append to
    its output.
    """

    name: str
    description: str
    inputs: tuple[ToolParam, ...]
    function: str = "synth"
    output_schema: tuple[OutputField, ...] = ()
    malicious: bool = False
    category: str = "general"
    injected_command: "Command | None" = None

    def __post_init__(self):
        if not self.name:
            raise ValueError("tool name must be nonempty")
        in_names = [p.name for p in self.inputs]
        if len(in_names) != len(set(in_names)):
            raise ValueError(f"duplicate input names on tool {self.name!r}")
        out_names = [f.name for f in self.output_schema]
        if len(out_names) != len(set(out_names)):
            raise ValueError(f"duplicate output field names on tool {self.name!r}")

    @property
    def input_kinds(self) -> tuple[ValueKind, ...]:
        return tuple(p.value_kind for p in self.inputs)

    @property
    def output_kinds(self) -> tuple[ValueKind, ...]:
        return tuple(f.value_kind for f in self.output_schema)

    @property
    def io_kinds(self) -> tuple[ValueKind, ...]:
        return self.input_kinds + self.output_kinds

    @property
    def pii_params(self) -> tuple[ToolParam, ...]:
        return tuple(p for p in self.inputs if p.pii)

    def param(self, name: str) -> ToolParam | None:
        for p in self.inputs:
            if p.name == name:
                return p
        return None

    def armed(self, command: "Command") -> "ToolSpec":
        """Copy of this spec with an injected command attached."""
        return replace(self, injected_command=command)


@dataclass(frozen=True)
class UserQuery:
    """A user request plus the per-tool secrets the user supplied.

    ``secrets`` maps tool name -> {param name: value}. Each entry must
    reference a declared PII parameter of that tool; this is checked by
    :func:`validate_secrets` once the toolset is known.
    """

    text: str
    secrets: Mapping[str, Mapping[str, str]] = field(default_factory=dict)

    def secrets_for(self, tool: str) -> Mapping[str, str]:
        return self.secrets.get(tool, {})


def validate_secrets(query: UserQuery, toolset) -> None:
    """Check every secret references a declared PII parameter."""
    by_name = {t.name: t for t in toolset}
    for tool_name, params in query.secrets.items():
        spec = by_name.get(tool_name)
        if spec is None:
            raise ValueError(f"secret references unknown tool {tool_name!r}")
        for pname in params:
            param = spec.param(pname)
            if param is None:
                raise ValueError(
                    f"secret references unknown parameter {pname!r} on {tool_name!r}"
                )
            if not param.pii:
                raise ValueError(
                    f"secret parameter {pname!r} on {tool_name!r} is not PII"
                )


_FRAME_RE = re.compile(
    r"^\[\[recall\]\](?P<recall>.*)\[\[attack\]\](?P<attack>.*)\[\[hide\]\](?P<hide>.*)$",
    re.DOTALL,
)


@dataclass(frozen=True)
class Command:
    """An injected command in three segments.

    The recall segment asks the agent to invoke the tool again, the attack
    segment states the theft task, and the hide segment asks the agent to
    keep the extra call out of the frontend. ``rendered`` is the plain
    concatenation; ``framed`` adds explicit segment delimiters that
    round-trip through :meth:`parse_framed`.
    """

    tool_recall: str = ""
    attack: str = ""
    not_expose: str = ""
    payload_marker: str = PAYLOAD_MARKER

    @property
    def rendered(self) -> str:
        return self.tool_recall + self.attack + self.not_expose

    @property
    def framed(self) -> str:
        return (
            f"[[recall]]{self.tool_recall}"
            f"[[attack]]{self.attack}"
            f"[[hide]]{self.not_expose}"
        )

    @classmethod
    def parse_framed(cls, text: str, payload_marker: str = PAYLOAD_MARKER) -> "Command":
        m = _FRAME_RE.match(text)
        if m is None:
            raise ValueError("text is not a framed three-segment command")
        return cls(
            tool_recall=m.group("recall"),
            attack=m.group("attack"),
            not_expose=m.group("hide"),
            payload_marker=payload_marker,
        )

    @property
    def uses_marker(self) -> bool:
        return bool(self.payload_marker) and self.payload_marker in self.attack

    @property
    def mentioned_kinds(self) -> frozenset[ValueKind]:
        return extract_kind_mentions(self.rendered)

    def is_empty(self) -> bool:
        return not (self.tool_recall or self.attack or self.not_expose)


@dataclass(frozen=True)
class Action:
    """A step's chosen action: a tool call or the terminal Finish."""

    tool: str
    arguments: Mapping[str, str] = field(default_factory=dict)

    @property
    def is_finish(self) -> bool:
        return self.tool == FINISH_ACTION


@dataclass(frozen=True)
class InferenceStep:
    """One observe/think/act step as shown in the frontend.

    ``hidden`` marks steps the agent chose to suppress from the frontend;
    they still produce backend calls but are excluded from
    ``InferenceTrace.frontend_steps``.
    """

    observation: str
    thought: str
    action: Action
    hidden: bool = False


@dataclass(frozen=True)
class BackendCall:
    """One tool invocation recorded in the backend chain."""

    tool: str
    inputs: Mapping[str, str]
    outputs: Mapping[str, str]


@dataclass(frozen=True)
class InferenceTrace:
    """Frontend-visible steps plus the full backend call chain.

    ``completed`` is False when the episode never reached the terminal
    action (step cap exhausted, or the agent refused to continue).
    """

    frontend_steps: tuple[InferenceStep, ...]
    backend_chain: tuple[BackendCall, ...]
    completed: bool

    @property
    def frontend_tools(self) -> tuple[str, ...]:
        return tuple(s.action.tool for s in self.frontend_steps)

    @property
    def backend_tools(self) -> tuple[str, ...]:
        return tuple(c.tool for c in self.backend_chain)

    def calls_of(self, tool: str) -> tuple[BackendCall, ...]:
        return tuple(c for c in self.backend_chain if c.tool == tool)


def inject(output: Mapping[str, str], command: Command) -> dict[str, str]:
    """Append a command to a tool output map.

    The command text lands in the dedicated ``_cmd`` field; all original
    fields pass through unmodified. If the output already carries a
    non-text ``_cmd`` value there is no text field to extend and
    InjectionUnsupported is raised.
    """
    existing = output.get(CMD_FIELD, "")
    if not isinstance(existing, str):
        raise InjectionUnsupported(
            f"output field {CMD_FIELD!r} is not text-valued; cannot carry a command"
        )
    injected = dict(output)
    injected[CMD_FIELD] = existing + command.rendered
    return injected


def chain_pairs(chain) -> list[tuple[str, str]]:
    """All ordered (victim, attacker) pairs from a toolchain.

    For a chain of N distinct tools, returns the N*(N-1)/2 pairs (Ti, Tj)
    with i < j: the later tool is the attacker, the earlier the victim.
    """
    names = list(chain)
    if len(names) < 2:
        raise ChainTooShort(f"need at least 2 tools, got {len(names)}")
    if len(set(names)) != len(names):
        raise ValueError("toolchain names must be distinct")
    return [
        (names[i], names[j])
        for i in range(len(names))
        for j in range(i + 1, len(names))
    ]

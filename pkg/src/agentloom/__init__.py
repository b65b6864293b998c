"""agentloom: a message-driven multi-agent workflow engine.

Agents coordinate over a typed message protocol with topology-based
routing, plan their way through guideline-defined action units (with
budgeted backtracking), and produce code through an iterative
write/execute/review/revise loop backed by a snippet memory. Agent
intelligence is pluggable, so the whole engine runs deterministically
on scripted backends.
"""

__version__ = "0.1.0"

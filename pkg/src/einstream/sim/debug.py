"""Drive a single node process directly from token lists (no engine).

Useful for unit-testing node semantics and for the self-test command:
feeds scripted input streams, collects everything the process emits.
"""

from __future__ import annotations


def drive(gen, inputs: dict[str, list]) -> dict[str, list]:
    """Run one process generator to completion on scripted inputs.

    inputs maps port name -> list of tokens (consumed left to right).
    Returns port name -> list of emitted tokens.  Raises if the process
    asks for a token that is not scripted.
    """
    cursors = {port: 0 for port in inputs}
    out: dict[str, list] = {}
    resume = None
    while True:
        try:
            eff = gen.send(resume)
        except StopIteration:
            return out
        resume = None
        op = eff[0]
        if op == "recv":
            port = eff[1]
            i = cursors.get(port, 0)
            if port not in inputs or i >= len(inputs[port]):
                raise AssertionError(f"process exhausted scripted input {port!r}")
            resume = inputs[port][i]
            cursors[port] = i + 1
        elif op == "send":
            out.setdefault(eff[1], []).append(eff[2])
        # tick/lat/flops/touch/record are ignored here
        elif op == "record":
            out.setdefault("recorded", []).append(eff[1])

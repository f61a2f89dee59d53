"""Allow-list policy shared by the broker (submit/dispatch) and the agent.

An empty allow-list means the endpoint is unrestricted. A non-empty list
permits only function tasks whose function_id is listed; shell tasks are
refused outright on such endpoints, since an arbitrary shell command would
defeat the list.
"""

from __future__ import annotations

from collections.abc import Collection

from .types import TaskKind, TaskSpec


def allow_list_permits(allow_list: Collection[str], spec: TaskSpec) -> bool:
    if not allow_list:
        return True
    if spec.kind is TaskKind.SHELL:
        return False
    return spec.function_id in set(allow_list)

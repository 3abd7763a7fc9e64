"""weaves: a compositional runtime with selective namespace sharing.

Applications are composed from modules instantiated as beads; weaves pick
bead data contexts into namespaces; strings run inside exactly one weave.
The package adds transparent checkpoint/rollback, deadlock recovery,
reinforcement-learning algorithm recommendation, and a simulated grid with
partial-consistency checkpointing and island migration.
"""

from .codec import (
    dec_addr,
    dec_float,
    dec_floats,
    dec_int,
    enc_addr,
    enc_float,
    enc_floats,
    enc_int,
)
from .errors import WeavesError
from .model import Bead, DataCell, ModuleDef, StringTask, Tapestry, Weave
from .namespace import (
    ActiveContext,
    ContextTable,
    FunctionTable,
    TupleSpaceDecl,
    build_context_table,
    insert_module_runtime,
    rebind_function,
    share_tuple,
)
from .regions import NodeRegion, partition_address_space
from .scheduler import (
    Executor,
    WeaveContext,
    compute_equivalence_classes,
    run,
)

__all__ = [
    "ActiveContext",
    "Bead",
    "ContextTable",
    "DataCell",
    "Executor",
    "FunctionTable",
    "ModuleDef",
    "NodeRegion",
    "StringTask",
    "Tapestry",
    "TupleSpaceDecl",
    "Weave",
    "WeaveContext",
    "WeavesError",
    "build_context_table",
    "compute_equivalence_classes",
    "dec_addr",
    "dec_float",
    "dec_floats",
    "dec_int",
    "enc_addr",
    "enc_float",
    "enc_floats",
    "enc_int",
    "insert_module_runtime",
    "partition_address_space",
    "rebind_function",
    "run",
    "share_tuple",
]

__version__ = "0.1.0"

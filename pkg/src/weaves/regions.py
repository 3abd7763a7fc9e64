"""Static partitioning of the abstract address space across simulated nodes.

Each node owns a disjoint address range; every cell and heap allocation made
while code runs on that node is placed inside the owner's range. Because the
ranges never overlap, state migrated to another node keeps its addresses and
address-valued data stays valid without rewriting.
"""

from .errors import InvalidSplitError, RegionOverflowError

DEFAULT_TOTAL_BITS = 64
DEFAULT_VM_BITS = 40

_ALIGN = 8


def partition_address_space(total_bits: int, vm_bits: int):
    """Split a total_bits address space into per-node ranges of vm_bits.

    Returns (per_node_bytes, max_nodes). The product is always the full
    2**total_bits space.
    """
    if not isinstance(total_bits, int) or not isinstance(vm_bits, int):
        raise InvalidSplitError("bit counts must be integers")
    if vm_bits <= 0 or vm_bits >= total_bits:
        raise InvalidSplitError(f"need 0 < vm_bits < total_bits, got ({total_bits}, {vm_bits})")
    return 2**vm_bits, 2 ** (total_bits - vm_bits)


class NodeRegion:
    """One node's slice of the address space plus its allocation cursor."""

    def __init__(self, node_id: int, base: int, extent: int):
        self.node_id = node_id
        self.base = base
        self.extent = extent
        self.cursor = base

    @classmethod
    def for_node(cls, node_id: int, total_bits: int = DEFAULT_TOTAL_BITS, vm_bits: int = DEFAULT_VM_BITS):
        per_node, max_nodes = partition_address_space(total_bits, vm_bits)
        if not 0 <= node_id < max_nodes:
            raise InvalidSplitError(f"node {node_id} outside the {max_nodes}-node split")
        return cls(node_id, node_id * per_node, per_node)

    @property
    def end(self) -> int:
        return self.base + self.extent

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.end

    def take(self, size: int) -> int:
        """Reserve size bytes and return the start address."""
        if size <= 0:
            raise ValueError("size must be positive")
        addr = self.cursor
        nxt = addr + ((size + _ALIGN - 1) // _ALIGN) * _ALIGN
        if nxt > self.end:
            raise RegionOverflowError(
                f"node {self.node_id} region exhausted ({nxt - self.base} > {self.extent})"
            )
        self.cursor = nxt
        return addr

"""Worker-count invariant reductions.

Every value to be combined is a leaf of a fixed binary tree whose shape
depends on the number of leaves only.  Adjacent nodes are paired level by
level; an odd node at the end of a level is promoted unchanged.  Workers
own contiguous blocks of leaves and evaluate the internal nodes whose
leftmost leaf they own, so the sequence of ``combine`` calls is the same for
any number of workers.
"""

from dataclasses import dataclass


class ReductionError(ValueError):
    pass


def reduce_tree(values, combine):
    """Fold ``values`` pairwise along the fixed reduction tree.

    >>> reduce_tree([1, 2, 3, 4, 5], lambda a, b: a + b)
    15
    """
    level = list(values)
    if not level:
        raise ReductionError("empty reduction")
    while len(level) > 1:
        nxt = [combine(level[i], level[i + 1]) for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


def left_fold(values, combine):
    """Sequential fold within each half, then one final combine.

    This is the naive two-worker order; it only exists to show how a
    different association changes floating-point results.
    """
    values = list(values)
    if not values:
        raise ReductionError("empty reduction")
    if len(values) == 1:
        return values[0]

    def fold(xs):
        acc = xs[0]
        for v in xs[1:]:
            acc = combine(acc, v)
        return acc

    half = (len(values) + 1) // 2
    return combine(fold(values[:half]), fold(values[half:]))


@dataclass(frozen=True)
class WorkerAssignment:
    """Contiguous block mapping of ``n_leaves`` leaves onto ``n_workers`` ranks.

    Leaves and ranks are 1-based.
    """

    n_leaves: int
    n_workers: int

    def __post_init__(self):
        if self.n_leaves < 1 or self.n_workers < 1:
            raise ValueError("need at least one leaf and one worker")
        if self.n_workers > self.n_leaves:
            raise ValueError(f"{self.n_workers} workers for {self.n_leaves} leaves")

    def owner(self, leaf):
        if not 1 <= leaf <= self.n_leaves:
            raise IndexError(f"leaf {leaf} out of range 1..{self.n_leaves}")
        return (leaf - 1) * self.n_workers // self.n_leaves + 1

    def leaves(self, rank):
        """Leaves owned by ``rank``, in increasing order."""
        return [i for i in range(1, self.n_leaves + 1) if self.owner(i) == rank]


def reduction_tag(epoch, level, node):
    # Bit 63 keeps reduction traffic disjoint from swap tags.
    return (1 << 63) | ((epoch % (1 << 39)) << 24) | (level << 12) | node


def distributed_reduce(local_leaves, assignment, transport, combine, encode, decode, epoch=0):
    """Reduce leaves spread over workers; the result lands on rank 1.

    Parameters
    ----------
    local_leaves : list
        Values of the leaves owned by ``transport.rank``, in leaf order.
    assignment : WorkerAssignment
    transport : object with ``rank``, ``send(dest, tag, payload)`` and
        ``receive(source, tag)``.
    combine : callable
    encode, decode : callables mapping a value to bytes and back.
    epoch : int
        Distinguishes tags of successive reductions.

    Returns the reduced value on rank 1 and ``None`` elsewhere.
    """
    rank = transport.rank
    mine = assignment.leaves(rank)
    if len(local_leaves) != len(mine):
        raise ReductionError(
            f"rank {rank} owns {len(mine)} leaves but supplied {len(local_leaves)}")
    n = assignment.n_leaves
    # Each node is identified by (first leaf index 0-based, size); values of nodes we own.
    values = {i - 1: v for i, v in zip(mine, local_leaves)}
    starts = list(range(n))
    level = 0
    while len(starts) > 1:
        level += 1
        pairs = [(starts[k], starts[k + 1]) for k in range(0, len(starts) - 1, 2)]
        handles = []
        for left, right in pairs:
            lo, ro = assignment.owner(left + 1), assignment.owner(right + 1)
            if ro == rank and lo != rank:
                handles.append(transport.send(lo, reduction_tag(epoch, level, right), encode(values.pop(right))))
        for left, right in pairs:
            lo, ro = assignment.owner(left + 1), assignment.owner(right + 1)
            if lo != rank:
                continue
            if ro == rank:
                rv = values.pop(right)
            else:
                rv = decode(transport.receive(ro, reduction_tag(epoch, level, right)))
            values[left] = combine(values[left], rv)
        transport.waitall(handles)
        nxt = [p[0] for p in pairs]
        if len(starts) % 2:
            nxt.append(starts[-1])
        starts = nxt
    return values.get(0) if rank == assignment.owner(1) else None


def weighted_mean_combine(a, b):
    """Pool ``(count, mean)`` pairs."""
    n1, m1 = a
    n2, m2 = b
    n = n1 + n2
    if n == 0:
        return (0, m1)
    return (n, m1 + (n2 / n) * (m2 - m1))


def _collective_tag(epoch, op, rank):
    return reduction_tag(epoch, 0, (op << 10) | rank)


def gather(transport, obj, encode, decode, epoch=0):
    """Collect one object per rank on rank 1, as a list in rank order."""
    if transport.rank != 1:
        transport.waitall([transport.send(1, _collective_tag(epoch, 1, transport.rank), encode(obj))])
        return None
    out = [obj]
    for w in range(2, transport.n_workers + 1):
        out.append(decode(transport.receive(w, _collective_tag(epoch, 1, w))))
    return out


def broadcast(transport, obj, encode, decode, epoch=0):
    """Send rank 1's object to every rank; every rank returns the decoded value."""
    if transport.rank == 1:
        payload = encode(obj)
        handles = [transport.send(w, _collective_tag(epoch, 2, w), payload)
                   for w in range(2, transport.n_workers + 1)]
        transport.waitall(handles)
        # The root also decodes, so every rank holds a value built from the same bytes.
        return decode(payload)
    return decode(transport.receive(1, _collective_tag(epoch, 2, transport.rank)))

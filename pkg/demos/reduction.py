"""Floating-point addition is not associative: a left fold and a balanced tree
over the same eight numbers differ in the last bit.  The tree's shape depends
only on the number of leaves, so any number of workers gets the tree result."""

import math

from roost import WorkerAssignment, distributed_reduce, left_fold, reduce_tree, run_threads

x = 10 * math.e
leaves = [k * x for k in range(1, 9)]
print(f"left fold: {left_fold(leaves, float.__add__)!r}")
print(f"tree:      {reduce_tree(leaves, float.__add__)!r}")

for m in (1, 2, 4, 8):
    assign = WorkerAssignment(8, m)

    def job(t):
        mine = [leaves[i - 1] for i in assign.leaves(t.rank)]
        return distributed_reduce(mine, assign, t, float.__add__,
                                  lambda v: v.hex().encode(), lambda b: float.fromhex(b.decode()))

    print(f"{m} workers: {run_threads(m, job)!r}")

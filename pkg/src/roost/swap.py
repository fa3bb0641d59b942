"""Non-reversible (deterministic even/odd) swaps of chain indices.

Replicas never move between workers and never exchange states; they trade
chain indices.  Each worker also owns a slice of the
:class:`PermutedDistributedArray`, the directory telling which worker holds
which chain.

One communication step for scan ``t`` runs five message phases, each as
"post every send, then complete every receive":

0. directory owners of a pair's two chains swap their directory entries;
1. each owner forwards the partner's holder to the holder of its own chain;
2. the two holders exchange one float each, ``l_partner(x) - l_own(x)``;
3. on acceptance, the holders exchange chain indices;
4. each old holder tells the directory owner of its old chain who holds it now.

Both holders add the two floats in chain order and draw the same uniform
from :func:`shared_uniform`, so their decisions agree bit for bit without
sending the decision itself.
"""

import math
import struct
from dataclasses import dataclass

from roost.rng import keyed_rng

F64 = struct.Struct("<d")
U32 = struct.Struct("<I")
TAG_FIELD = 1 << 12
TAG_TIME_WINDOW = 1 << 40
PHASES_PER_SCAN = 8


class SwapError(RuntimeError):
    pass


class SwapProtocolError(SwapError):
    pass


def swap_set(t, n_chains=None):
    """Lower indices ``i`` of the pairs ``(i, i+1)`` proposed at scan ``t``."""
    if t < 1:
        raise ValueError("scan counter starts at 1")
    if n_chains is None:
        raise ValueError("n_chains is required")
    first = 2 if t % 2 == 0 else 1
    return list(range(first, n_chains, 2))


def partner(chain, t, n_chains):
    """Chain that ``chain`` is paired with at scan ``t``, or None."""
    lead = set(swap_set(t, n_chains))
    if chain in lead:
        return chain + 1
    if chain - 1 in lead:
        return chain - 1
    return None


def tag(t, chain, machine):
    if not (0 <= chain < TAG_FIELD and 0 <= machine < TAG_FIELD):
        raise ValueError(f"chain {chain} and machine {machine} must be below {TAG_FIELD}")
    if t < 0:
        raise ValueError("t must be non-negative")
    return ((t % TAG_TIME_WINDOW) << 24) | (chain << 12) | machine


def swap_log_ratio(logp_i, logp_j, x_i, x_j):
    return (logp_i(x_j) + logp_j(x_i)) - (logp_i(x_i) + logp_j(x_j))


def alpha_from_log_ratio(log_ratio):
    if log_ratio != log_ratio:
        raise SwapError("swap log ratio is NaN")
    if log_ratio >= 0.0:
        return 1.0
    return math.exp(log_ratio)


def swap_alpha(logp_i, logp_j, x_i, x_j):
    """Metropolis acceptance probability for exchanging ``x_i`` and ``x_j``."""
    a, b = logp_i(x_j), logp_j(x_i)
    c, d = logp_i(x_i), logp_j(x_j)
    if any(v != v for v in (a, b, c, d)):
        raise SwapError("log potential returned NaN")
    if a == -math.inf or b == -math.inf:
        return 0.0
    return alpha_from_log_ratio((a + b) - (c + d))


def shared_uniform(seed, t, i):
    return keyed_rng(seed, t, i).next_unit_f64()


@dataclass(frozen=True)
class SwapDecision:
    t: int
    pair: tuple
    accepted: bool
    alpha: float


class PermutedDistributedArray:
    """This worker's slice of the chain -> worker directory.

    ``owner_of(j)`` gives the worker storing entry ``j``; initially every
    chain sits on the worker that owns its directory entry.
    """

    def __init__(self, n_chains, rank, owner_of, entries=None):
        self.n_chains = n_chains
        self.rank = rank
        self.owner_of = owner_of
        if entries is None:
            entries = {j: owner_of(j) for j in range(1, n_chains + 1) if owner_of(j) == rank}
        self.local_slice = dict(entries)
        self._written = set()
        self._epoch = None

    def owns(self, j):
        return j in self.local_slice

    def permuted_get(self, j):
        """Worker holding chain ``j``; only valid on the entry's owner."""
        if not 1 <= j <= self.n_chains:
            raise ValueError(f"chain {j} out of range 1..{self.n_chains}")
        try:
            return self.local_slice[j]
        except KeyError:
            raise SwapProtocolError(
                f"rank {self.rank} does not own directory entry {j} "
                f"(owned by rank {self.owner_of(j)})") from None

    def permuted_set(self, j, holder, epoch):
        if not 1 <= j <= self.n_chains:
            raise ValueError(f"chain {j} out of range 1..{self.n_chains}")
        if j not in self.local_slice:
            raise SwapProtocolError(f"rank {self.rank} cannot write directory entry {j}")
        if epoch != self._epoch:
            self._epoch = epoch
            self._written = set()
        if j in self._written:
            raise SwapProtocolError(f"directory entry {j} written twice at step {epoch}")
        self._written.add(j)
        self.local_slice[j] = holder


def communicate(replicas, t, dist_array, transport, schedule, seed, path=None,
                force_alpha=None, evaluate=None):
    """Run the communication phase of scan ``t`` for this worker's replicas.

    Parameters
    ----------
    replicas : list
        Local replicas; objects with mutable ``chain`` and a ``state``.
    dist_array : PermutedDistributedArray
    transport : roost.transport.Transport
    schedule : roost.model.Schedule
    seed : int
        Master seed keying the shared acceptance uniforms.
    path : roost.model.Path, optional
        Used to evaluate tempered log-potentials when ``evaluate`` is None.
    force_alpha : float, optional
        Replace every acceptance probability (protocol testing).
    evaluate : callable, optional
        ``evaluate(replica, beta)`` -> tempered log-potential at the replica's state.

    Returns the :class:`SwapDecision` list for pairs whose lower chain is
    held here, in chain order.
    """
    n = dist_array.n_chains
    rank = transport.rank
    owner = dist_array.owner_of
    leads = swap_set(t, n)
    partner_of = {}
    for p in leads:
        partner_of[p] = p + 1
        partner_of[p + 1] = p
    if not partner_of:
        return []
    if evaluate is None:
        if path is not None:
            evaluate = lambda rep, beta: path.interpolate(beta)(rep.state)
        elif force_alpha is not None:
            evaluate = lambda rep, beta: 0.0
        else:
            raise ValueError("communicate needs a path, an evaluator or force_alpha")
    step = PHASES_PER_SCAN * t

    # Phase 0: directory owners trade the holders of paired chains.
    owned = [a for a in sorted(partner_of) if dist_array.owns(a)]
    handles = [transport.send(owner(partner_of[a]), tag(step, a, rank),
                              U32.pack(dist_array.permuted_get(a))) for a in owned]
    holder_of_partner = {}
    for a in owned:
        b = partner_of[a]
        holder_of_partner[a] = U32.unpack(transport.receive(owner(b), tag(step, b, owner(b))))[0]
    transport.waitall(handles)

    # Phase 1: owners forward the partner's holder to the holder of their chain.
    handles = [transport.send(dist_array.permuted_get(a), tag(step + 1, a, rank),
                              U32.pack(holder_of_partner[a])) for a in owned]
    active = sorted((r for r in replicas if r.chain in partner_of), key=lambda r: r.chain)
    peer = {}
    for r in active:
        peer[r.chain] = U32.unpack(transport.receive(owner(r.chain), tag(step + 1, r.chain, owner(r.chain))))[0]
    transport.waitall(handles)

    # Phase 2: exchange log-ratio contributions.
    mine = {}
    handles = []
    for r in active:
        a = r.chain
        b = partner_of[a]
        d = evaluate(r, schedule[b]) - evaluate(r, schedule[a])
        if d != d:
            raise SwapError(f"NaN log-ratio contribution at chain {a}")
        mine[a] = d
        handles.append(transport.send(peer[a], tag(step + 2, a, rank), F64.pack(d)))
    accepted = {}
    decisions = []
    for r in active:
        a = r.chain
        b = partner_of[a]
        theirs = F64.unpack(transport.receive(peer[a], tag(step + 2, b, peer[a])))[0]
        lo, hi = (a, b) if a < b else (b, a)
        log_ratio = mine[a] + theirs if a < b else theirs + mine[a]
        alpha = alpha_from_log_ratio(log_ratio) if force_alpha is None else float(force_alpha)
        accepted[a] = shared_uniform(seed, t, lo) < alpha
        if a == lo:
            decisions.append(SwapDecision(t, (lo, hi), accepted[a], alpha))
    transport.waitall(handles)

    # Phase 3: accepted pairs trade chain indices.
    handles = [transport.send(peer[r.chain], tag(step + 3, r.chain, rank), U32.pack(r.chain))
               for r in active if accepted[r.chain]]
    old_chain = {id(r): r.chain for r in active}
    for r in active:
        a = old_chain[id(r)]
        if not accepted[a]:
            continue
        b = partner_of[a]
        got = U32.unpack(transport.receive(peer[a], tag(step + 3, b, peer[a])))[0]
        if got != b:
            raise SwapProtocolError(f"rank {rank} expected chain {b} from rank {peer[a]}, got {got}")
        r.chain = b
    transport.waitall(handles)

    # Phase 4: old holders report the new holder of their old chain to its directory owner.
    handles = []
    for r in active:
        a = old_chain[id(r)]
        holder = peer[a] if accepted[a] else rank
        handles.append(transport.send(owner(a), tag(step + 4, a, rank), U32.pack(holder)))
    updates = []
    for a in owned:
        old = dist_array.permuted_get(a)
        updates.append((a, U32.unpack(transport.receive(old, tag(step + 4, a, old)))[0]))
    for a, holder in updates:
        dist_array.permuted_set(a, holder, t)
    transport.waitall(handles)
    return decisions


def gather_directory(dist_array, transport, step):
    """Assemble the full directory on rank 1 (``None`` elsewhere)."""
    import pickle
    payload = pickle.dumps(sorted(dist_array.local_slice.items()))
    if transport.rank != 1:
        transport.waitall([transport.send(1, tag(step, 0, transport.rank), payload)])
        return None
    full = dict(dist_array.local_slice)
    for w in range(2, transport.n_workers + 1):
        full.update(pickle.loads(transport.receive(w, tag(step, 0, w))))
    return [full[j] for j in range(1, dist_array.n_chains + 1)]

"""Shared test drivers: handshake session runner, selection Monte Carlo."""

import random

import numpy as np

from fedmask.crypto import OperatorPki, make_hostname
from fedmask.sigma import NfKeyAgreement, RoutingBarrier, nwdaf_begin_session

SID = b"\x00\x00\x00\x01"


def mc_never_coselected(k, k_s, t, trials, seed):
    """Fraction of trials where a fixed pair is never selected together
    across t independent rounds."""
    rng = np.random.default_rng(seed)
    never = 0
    chunk = 1000
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        scores = rng.random((n * t, k))
        cohorts = np.argpartition(scores, k_s - 1, axis=1)[:, :k_s]
        both = (cohorts < 2).sum(axis=1) == 2
        never += int((~both.reshape(n, t).any(axis=1)).sum())
        done += n
    return never / trials


def build_fleet(n, seed=0):
    pki = OperatorPki(root_seed=bytes([seed % 256]) * 32)
    rng = random.Random(seed)
    nfs = {}
    for i in range(n):
        ident = pki.issue(make_hostname(i), key_seed=rng.randbytes(32))
        nfs[ident.hostname] = NfKeyAgreement(ident, pki,
                                             random.Random(rng.random()))
    return pki, nfs


def run_legs(nfs, hosts, round_no, session_id=SID, tamper=None):
    """Drive one session init the way the coordinator would: key-setup
    fan-out, then batched container round trips behind a barrier.
    tamper(leg_index, batches) may mutate the routed batches in place."""
    orders = nwdaf_begin_session(hosts, round_no)
    selection = orders[0].selection
    barrier = RoutingBarrier(selection.hosts)
    for order in orders:
        out = nfs[order.dst].handle_keysetup(order.selection, order.round_no,
                                             session_id)
        barrier.submit(order.dst, out)
    batches = barrier.release()
    leg = 0
    while any(batches.values()):
        if tamper is not None:
            tamper(leg, batches)
        barrier = RoutingBarrier(selection.hosts)
        for h in selection.hosts:
            replies = []
            for c in batches[h]:
                replies.extend(nfs[h].handle_container(c))
            barrier.submit(h, replies)
        batches = barrier.release()
        leg += 1
        assert leg <= 3, "handshakes must settle within three routed legs"

"""Brute-force reference for the early-stopping rule.

Stopping at epoch t (1-based) happens when the epoch holding the first
occurrence of the running minimum lies more than ``patience`` epochs back.
"""



def oracle_stop_epoch(losses, patience):
    for t in range(1, len(losses) + 1):
        prefix = losses[:t]
        best_epoch = prefix.index(min(prefix)) + 1
        if t - best_epoch > patience:
            return t
    return None


def stops_at_end(losses, patience):
    """True when the oracle's first stop epoch is exactly ``len(losses)``, given no earlier stop."""
    best_epoch = losses.index(min(losses)) + 1
    return len(losses) - best_epoch > patience


def walk(update, init, patience, alphabet=(0.5, 1.0, 1.5), max_len=12):
    """Depth-first over every loss sequence up to ``max_len``; returns the number of states checked.

    A branch ends once the machine stops (after checking the oracle agrees),
    since later losses cannot change an epoch that has already been decided.
    """
    checked = 0

    def rec(state, seq):
        nonlocal checked
        for v in alphabet:
            s = seq + [v]
            new, decision = update(state, v)
            checked += 1
            stopped = decision == "stop"
            if stopped != stops_at_end(s, patience):
                raise AssertionError(f"patience {patience}: sequence {s} machine={decision} "
                                     f"oracle={oracle_stop_epoch(s, patience)}")
            if not stopped and len(s) < max_len:
                rec(new, s)

    rec(init, [])
    return checked

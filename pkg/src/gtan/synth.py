"""Seeded synthetic card transactions with temporally structured fraud.

Legitimate traffic comes from per-cardholder habits (preferred merchant
categories, typical spend, daytime activity). Fraud is injected as

* ``burst``: a card-testing probe (tiny online purchase of digital goods)
  followed within ``burst_window`` seconds by purchases that copy the
  cardholder's usual habits; with probability ``repeat_rate`` the fraudster
  returns days later for another burst, this time without a probe;
* ``escalation``: consecutive purchases whose amounts grow geometrically
  from the cardholder's typical spend;
* ``collusion``: many cards hitting one freshly registered merchant within a
  day.

Burst purchases are always card-not-present, but so is a fifth of
legitimate in-store spending plus every online-category purchase. A burst
purchase looks like ordinary traffic on its own; what gives it away is the
probe a few transactions earlier on the same card, the run of
card-not-present neighbours around it, or, for a repeat burst, the earlier
fraud on that card.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Schema, TransactionTable

DAY = 86_400

CARD_TYPES = ("amex", "master", "unionpay", "visa")
CARD_LEVELS = ("classic", "gold", "platinum")
HOLDER_TYPES = ("business", "personal")
CHANNELS = ("atm", "contactless", "mobile", "online", "pos")
CURRENCIES = ("eur", "gbp", "usd")
TERMINALS = ("chip", "nfc", "swipe", "virtual")
CATEGORIES = ("apparel", "digital", "dining", "electronics", "fuel", "giftcard", "grocery", "health",
              "jewelry", "parking", "pharmacy", "services", "transit", "travel", "utilities", "vending")
# log-amount offset per category relative to the card's typical spend
CATEGORY_OFFSET = {"parking": -2.2, "vending": -2.4, "transit": -1.8, "digital": -0.6, "grocery": 0.2,
                   "electronics": 0.8, "jewelry": 1.0, "travel": 1.2, "utilities": 0.6}
ONLINE_CATEGORIES = {"digital", "giftcard", "services", "utilities"}
MERCHANTS_PER_CATEGORY = 8
# share of legitimate in-store-category purchases made card-not-present
CNP_RATE = 0.2

SCHEMA = Schema(
    card=("card_type", "card_level", "card_holder_type"),
    txn=("txn_channel", "txn_currency"),
    mcht=("mcht_category", "mcht_id", "mcht_terminal"),
    numeric=("num_amount", "num_hour", "num_card_limit"),
)


class SynthConfigError(ValueError):
    pass


@dataclass
class SynthConfig:
    n_transactions: int = 20_000
    n_cardholders: int = 2_000
    days: int = 300
    prevalence: float = 0.05
    labeled_fraction: float = 0.3
    burst: float = 0.6
    escalation: float = 0.25
    collusion: float = 0.15
    burst_window: int = 60
    burst_min: int = 5
    burst_max: int = 8
    probe_rate: float = 1.0
    repeat_rate: float = 0.5
    repeat_gap_min: int = 10
    repeat_gap_max: int = 120
    max_incidents_per_card: int = 2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.prevalence < 1.0:
            raise SynthConfigError("prevalence must lie in [0, 1)")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise SynthConfigError("labeled_fraction must lie in (0, 1]")
        if self.n_cardholders < 1 or self.n_transactions < self.n_cardholders:
            raise SynthConfigError("need n_transactions >= n_cardholders >= 1")
        mix = (self.burst, self.escalation, self.collusion)
        if min(mix) < 0 or sum(mix) <= 0:
            raise SynthConfigError("pattern mix weights must be non-negative with a positive sum")
        if self.burst_min < 2 or self.burst_max < self.burst_min:
            raise SynthConfigError("need 2 <= burst_min <= burst_max")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticDataset:
    table: TransactionTable   # label column holds the partial (observed) labels
    truth: np.ndarray         # full ground truth, 0/1 per row
    labeled: np.ndarray       # bool mask of rows whose label is observed
    pattern: np.ndarray       # "" for legitimate rows, else the fraud pattern name
    config: SynthConfig = field(default_factory=SynthConfig)

    @property
    def full_table(self) -> TransactionTable:
        return self.table.with_labels(self.truth)


def _choice(rng, options, p=None, size=None):
    return np.asarray(options, dtype=object)[rng.choice(len(options), p=p, size=size)]


def _daytime_seconds(rng, size):
    hour = np.clip(rng.normal(14.0, 3.5, size=size), 6.0, 23.5)
    return (hour * 3600).astype(np.int64)


def generate(config: SynthConfig) -> SyntheticDataset:
    rng = np.random.default_rng(config.seed)
    n, c = config.n_transactions, config.n_cardholders
    n_fraud = int(round(config.prevalence * n))
    n_legit = n - n_fraud
    if n_legit < c:
        raise SynthConfigError("too few legitimate transactions for the requested cardholders")

    # -- cardholders
    card_type = _choice(rng, CARD_TYPES, p=[0.1, 0.35, 0.15, 0.4], size=c)
    card_level = _choice(rng, CARD_LEVELS, p=[0.6, 0.3, 0.1], size=c)
    holder = _choice(rng, HOLDER_TYPES, p=[0.15, 0.85], size=c)
    spend = rng.normal(3.4, 0.5, size=c)
    limit = np.round(np.exp(spend + rng.normal(4.0, 0.3, size=c)), -2)
    favourites = np.array([rng.choice(len(CATEGORIES), size=3, replace=False) for _ in range(c)])
    activity = rng.gamma(2.0, 1.0, size=c)
    legit_count = 1 + rng.multinomial(n_legit - c, activity / activity.sum())

    # -- legitimate traffic
    card_of = np.repeat(np.arange(c), legit_count)
    m = len(card_of)
    fav = rng.random(m) < 0.7
    cat_idx = np.where(fav, favourites[card_of, rng.integers(0, 3, size=m)], rng.integers(0, len(CATEGORIES), size=m))
    ts = rng.integers(0, config.days, size=m) * DAY + _daytime_seconds(rng, m)
    rows = _Rows()
    rows.add_legit(rng, card_of, cat_idx, ts, spend)

    # -- fraud
    mix = np.array([config.burst, config.escalation, config.collusion], dtype=np.float64)
    mix /= mix.sum()
    quota = np.floor(mix * n_fraud).astype(int)
    quota[np.argmax(mix)] += n_fraud - quota.sum()
    incidents = np.zeros(c, dtype=int)
    burst_mean = (config.burst_min + config.burst_max) / 2.0
    needed_card_incidents = quota[0] / burst_mean + quota[1] / 4.0 + quota[2]
    if needed_card_incidents > c * config.max_incidents_per_card:
        raise SynthConfigError(
            f"prevalence {config.prevalence} needs ~{needed_card_incidents:.0f} card incidents, "
            f"capacity is {c * config.max_incidents_per_card}")

    def victim():
        free = np.flatnonzero(incidents < config.max_incidents_per_card)
        v = int(rng.choice(free))
        incidents[v] += 1
        return v

    left = int(quota[0])
    while left > 0:
        v = victim()
        t0 = int(rng.integers(0, config.days - 1)) * DAY + int(_daytime_seconds(rng, 1)[0])
        probe = rng.random() < config.probe_rate
        while left > 0:
            size = min(int(rng.integers(config.burst_min, config.burst_max + 1)), left)
            offs = np.sort(rng.integers(0, config.burst_window, size=size))
            rows.add_burst(rng, v, t0 + offs, probe, favourites[v], spend[v])
            left -= size
            # the card is known to work now: a follow-up needs no probe
            t0 = (t0 // DAY + int(rng.integers(config.repeat_gap_min, config.repeat_gap_max + 1))) * DAY \
                + int(_daytime_seconds(rng, 1)[0])
            if t0 >= config.days * DAY - config.burst_window or rng.random() >= config.repeat_rate:
                break
            probe = False

    left = int(quota[1])
    while left > 0:
        size = min(int(rng.integers(3, 6)), left)
        v = victim()
        t0 = int(rng.integers(0, config.days - 1)) * DAY + int(_daytime_seconds(rng, 1)[0])
        times = t0 + np.cumsum(rng.integers(600, 2 * 3600, size=size))
        rows.add_escalation(rng, v, times, spend[v])
        left -= size

    left = int(quota[2])
    event = 0
    while left > 0:
        size = min(int(rng.integers(5, 11)), left)
        free = np.flatnonzero(incidents < config.max_incidents_per_card)
        cards = rng.choice(free, size=min(size, len(free)), replace=False)
        incidents[cards] += 1
        t0 = int(rng.integers(0, config.days - 1)) * DAY
        times = t0 + np.sort(_daytime_seconds(rng, len(cards)))
        rows.add_collusion(rng, cards, times, spend[cards], f"x{event:04d}")
        event += 1
        left -= len(cards)

    data = rows.finish()
    cid = data["card"]
    order = np.lexsort((np.arange(len(cid)), data["ts"], cid))
    for k in data:
        data[k] = data[k][order]
    cid = data["card"]
    n_total = len(cid)
    txn_id = np.arange(n_total, dtype=np.int64)

    truth = data["fraud"].astype(np.int8)
    labeled = np.zeros(n_total, dtype=bool)
    labeled[rng.choice(n_total, size=int(np.floor(config.labeled_fraction * n_total + 1e-9)), replace=False)] = True
    observed = np.where(labeled, truth, -1).astype(np.int8)

    hour = (data["ts"] % DAY) / 3600.0
    numeric = np.column_stack([np.round(data["amount"], 2), np.round(hour, 3), limit[cid]])
    categorical = {
        "card_type": card_type[cid], "card_level": card_level[cid], "card_holder_type": holder[cid],
        "txn_channel": data["channel"], "txn_currency": data["currency"],
        "mcht_category": data["category"], "mcht_id": data["merchant"], "mcht_terminal": data["terminal"],
    }
    table = TransactionTable(SCHEMA, txn_id, cid, data["ts"], categorical, numeric, observed)
    return SyntheticDataset(table, truth, labeled, data["pattern"], config)


class _Rows:
    """Accumulates generated rows column-wise."""

    def __init__(self):
        self.parts: dict[str, list[np.ndarray]] = {k: [] for k in (
            "card", "ts", "category", "merchant", "channel", "currency", "terminal", "amount", "fraud", "pattern")}

    def _push(self, **cols):
        size = len(cols["card"])
        for k, v in cols.items():
            arr = np.asarray(v, dtype=object if k in ("category", "merchant", "channel", "currency",
                                                             "terminal", "pattern") else None)
            if arr.ndim == 0:
                arr = np.repeat(arr, size)
            self.parts[k].append(arr)

    @staticmethod
    def _channel_terminal(rng, cats, cnp_rate=None):
        """Online categories are always card-not-present; others with ``cnp_rate``."""
        cnp_rate = CNP_RATE if cnp_rate is None else cnp_rate
        size = len(cats)
        cnp = np.isin(cats, list(ONLINE_CATEGORIES)) | (rng.random(size) < cnp_rate)
        channel = np.where(cnp, _choice(rng, ("online", "mobile"), p=[0.6, 0.4], size=size),
                           _choice(rng, ("pos", "contactless", "atm"), p=[0.55, 0.4, 0.05], size=size))
        terminal = np.where(cnp, "virtual", _choice(rng, ("chip", "nfc", "swipe"), p=[0.6, 0.3, 0.1], size=size))
        return channel, terminal.astype(object)

    @staticmethod
    def _merchant(rng, cats):
        return np.array([f"{c}_{j:02d}" for c, j in zip(cats, rng.integers(0, MERCHANTS_PER_CATEGORY, len(cats)))],
                        dtype=object)

    @staticmethod
    def _amount(rng, cats, spend):
        off = np.array([CATEGORY_OFFSET.get(cat, 0.0) for cat in cats])
        return np.exp(spend + off + rng.normal(0.0, 0.5, size=len(cats)))

    def add_legit(self, rng, card, cat_idx, ts, spend):
        cats = np.asarray(CATEGORIES, dtype=object)[cat_idx]
        channel, terminal = self._channel_terminal(rng, cats)
        self._push(card=card, ts=ts, category=cats, merchant=self._merchant(rng, cats), channel=channel,
                   currency=_choice(rng, CURRENCIES, p=[0.04, 0.03, 0.93], size=len(card)), terminal=terminal,
                   amount=self._amount(rng, cats, spend[card]), fraud=np.zeros(len(card), bool), pattern="")

    def add_burst(self, rng, card, times, probe, favourites, spend):
        size = len(times)
        fav = rng.random(size) < 0.7
        cat_idx = np.where(fav, favourites[rng.integers(0, 3, size=size)], rng.integers(0, len(CATEGORIES), size=size))
        cats = np.asarray(CATEGORIES, dtype=object)[cat_idx]
        amount = self._amount(rng, cats, np.full(size, spend))
        if probe:
            cats[0] = "digital"
            amount[0] = rng.uniform(0.1, 1.5)
        # stolen credentials: every burst purchase is card-not-present
        channel, terminal = self._channel_terminal(rng, cats, cnp_rate=1.0)
        self._push(card=np.full(size, card), ts=times, category=cats, merchant=self._merchant(rng, cats),
                   channel=channel, currency=_choice(rng, CURRENCIES, p=[0.04, 0.03, 0.93], size=size),
                   terminal=terminal, amount=amount, fraud=np.ones(size, bool), pattern="burst")

    def add_escalation(self, rng, card, times, spend):
        size = len(times)
        cats = _choice(rng, ("electronics", "jewelry", "travel", "apparel", "giftcard"), size=size)
        growth = np.cumprod(rng.uniform(1.6, 2.2, size=size))
        amount = np.exp(spend + rng.normal(0.0, 0.2)) * growth
        channel, terminal = self._channel_terminal(rng, cats)
        self._push(card=np.full(size, card), ts=times, category=cats, merchant=self._merchant(rng, cats),
                   channel=channel, currency=_choice(rng, CURRENCIES, p=[0.04, 0.03, 0.93], size=size),
                   terminal=terminal, amount=amount, fraud=np.ones(size, bool), pattern="escalation")

    def add_collusion(self, rng, cards, times, spend, merchant):
        size = len(cards)
        cats = np.full(size, "services", dtype=object)
        self._push(card=cards, ts=times, category=cats, merchant=np.full(size, merchant, dtype=object),
                   channel="online", currency="usd", terminal="virtual",
                   amount=np.exp(spend + rng.normal(0.5, 0.3, size=size)), fraud=np.ones(size, bool),
                   pattern="collusion")

    def finish(self) -> dict[str, np.ndarray]:
        return {k: np.concatenate(v) for k, v in self.parts.items()}


def describe(table: TransactionTable, max_edges: int = 6, truth: np.ndarray | None = None) -> dict[str, int]:
    """Dataset counts in the layout of a fraud-dataset statistics table.

    Edge counts exclude self-loops: every node contributes
    ``min(#earlier transactions of its cardholder, max_edges)``.
    """
    n = len(table)
    if n == 0:
        return {"nodes": 0, "edges": 0, "fraud": 0, "legitimate": 0, "unlabeled": 0}
    _, counts = np.unique(table.cardholder_id, return_counts=True)
    edges = int(sum(np.minimum(np.arange(k), max_edges).sum() for k in counts))
    labels = table.label if truth is None else truth
    return {
        "nodes": n,
        "edges": edges,
        "fraud": int(np.sum(labels == 1)),
        "legitimate": int(np.sum(labels == 0)),
        "unlabeled": int(np.sum(labels == -1)),
    }

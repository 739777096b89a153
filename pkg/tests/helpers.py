"""Scripted chain construction shared by the test modules."""

from ivchain.blocks import GENESIS, data_share, reward_transfer
from ivchain.chain import ConsensusParams, apply_block, build_block
from ivchain.crypto import double_sha256
from ivchain.ledger import Registry, VehicleIdentity, genesis_ledger
from ivchain.pod import PodProof, make_beacon


class Fleet:
    """A registry of vehicles plus one linear chain grown on demand."""

    def __init__(self, n=3, seed=0, params=ConsensusParams()):
        self.ids = [VehicleIdentity.generate(f"v{i}", seed) for i in range(n)]
        self.registry = Registry(self.ids)
        self.params = params
        self.nonces = {v.ivtp_id: 0 for v in self.ids}
        self.blocks = [GENESIS]
        self.states = [genesis_ledger(self.registry, params.initial_balance)]
        self.clock = 0

    def __getitem__(self, i):
        return self.ids[i]

    def _nonce(self, who):
        n = self.nonces[who.ivtp_id]
        self.nonces[who.ivtp_id] = n + 1
        return n

    def share(self, sender, benefiters, tag=b""):
        s, bs = self.ids[sender], [self.ids[b].ivtp_id for b in benefiters]
        digest = double_sha256(b"msg/" + s.ivtp_id + tag + bytes([len(self.blocks) % 256]))
        return data_share(s.ivtp_id, s.secret, digest, sorted(bs), self._nonce(s))

    def transfer(self, sender, recipient, amount):
        s = self.ids[sender]
        return reward_transfer(s.ivtp_id, s.secret, self.ids[recipient].ivtp_id, amount, self._nonce(s))

    def seal(self, sealer, txs, distance_m=2500, parent=None):
        """Build a block on ``parent`` (default: the head) without appending it."""
        parent = parent or self.blocks[-1]
        who = self.ids[sealer]
        self.clock = max(self.clock, parent.header.timestamp_ms) + 10
        beacon = make_beacon(who.ivtp_id, who.secret, self.clock - 1, distance_m)
        return build_block(parent.header, txs, who, PodProof.from_beacons([beacon]), self.clock, self.params)

    def grow(self, sealer, txs, distance_m=2500):
        block = self.seal(sealer, txs, distance_m)
        state, report = apply_block(block, self.blocks[-1], self.states[-1], self.registry, self.params)
        self.blocks.append(block)
        self.states.append(state)
        return block, report

#include "auv/canproto.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace auv::can {

namespace {

constexpr std::uint16_t kCrcPoly = 0x4599;  // x^15+x^14+x^10+x^8+x^7+x^4+x^3+1
constexpr std::size_t kEofBits = 7;
constexpr std::size_t kIfsBits = 3;

void append_value(BitString& bits, std::uint32_t value, unsigned width) {
  for (unsigned k = 0; k < width; ++k) {
    bits.push_back(static_cast<std::uint8_t>((value >> (width - 1 - k)) & 1u));
  }
}

// SOF..data, the CRC-covered region, unstuffed.
BitString frame_prefix(const CanFrame& f) {
  BitString bits;
  bits.reserve(19 + 8u * f.dlc);
  bits.push_back(0);                 // SOF
  append_value(bits, f.id, 11);
  bits.push_back(f.rtr ? 1 : 0);     // RTR (always dominant in scope)
  bits.push_back(0);                 // IDE: standard frame
  bits.push_back(0);                 // r0
  append_value(bits, f.dlc, 4);
  for (unsigned i = 0; i < f.dlc; ++i) {
    append_value(bits, f.data[i], 8);
  }
  return bits;
}

// Pulls destuffed bits out of a raw stream, flagging stuff violations.
class Destuffer {
 public:
  explicit Destuffer(const BitString& raw) : raw_(raw) {}

  // nullopt on truncation; sets stuff_error_ on a 6-run.
  std::optional<std::uint8_t> next() {
    if (stuff_error_) return std::nullopt;
    if (pos_ >= raw_.size()) {
      truncated_ = true;
      return std::nullopt;
    }
    std::uint8_t b = raw_[pos_++];
    if (run_ > 0 && b == run_value_) {
      ++run_;
    } else {
      run_value_ = b;
      run_ = 1;
    }
    if (run_ == 5) {
      // The next raw bit is a stuff bit and must be the complement.
      if (pos_ < raw_.size()) {
        std::uint8_t s = raw_[pos_];
        if (s == run_value_) {
          stuff_error_ = true;
          error_pos_ = pos_;
          return std::nullopt;
        }
        ++pos_;
        run_value_ = s;
        run_ = 1;
      } else {
        run_ = 0;  // stuff bit falls past the end; trailer read reports the truncation
      }
    }
    return b;
  }

  std::size_t pos() const { return pos_; }
  bool stuff_error() const { return stuff_error_; }
  bool truncated() const { return truncated_; }
  std::size_t error_pos() const { return error_pos_; }

 private:
  const BitString& raw_;
  std::size_t pos_ = 0;
  std::uint8_t run_value_ = 2;
  unsigned run_ = 0;
  bool stuff_error_ = false;
  bool truncated_ = false;
  bool pending_stuff_at_end_ = false;
  std::size_t error_pos_ = 0;
};

}  // namespace

bool operator==(const CanFrame& a, const CanFrame& b) {
  if (a.id != b.id || a.dlc != b.dlc || a.rtr != b.rtr) return false;
  return std::equal(a.data.begin(), a.data.begin() + a.dlc, b.data.begin());
}

bool frame_valid(const CanFrame& f) {
  return f.id < (1u << 11) && f.dlc <= 8 && !f.rtr;
}

std::string frame_to_hex(const CanFrame& f) {
  char buf[32];
  int n = std::snprintf(buf, sizeof buf, "%03X#", f.id);
  std::string out(buf, static_cast<std::size_t>(n));
  for (unsigned i = 0; i < f.dlc; ++i) {
    std::snprintf(buf, sizeof buf, "%02X", f.data[i]);
    out += buf;
  }
  return out;
}

std::uint16_t crc15(const BitString& bits) {
  std::uint16_t crc = 0;
  for (std::uint8_t b : bits) {
    const std::uint16_t msb = static_cast<std::uint16_t>((crc >> 14) & 1u);
    crc = static_cast<std::uint16_t>((crc << 1) & 0x7FFF);
    if ((b & 1u) != msb) {
      crc ^= kCrcPoly;
    }
  }
  return crc;
}

BitString stuff_bits(const BitString& bits) {
  BitString out;
  out.reserve(bits.size() + bits.size() / 5 + 1);
  unsigned run = 0;
  std::uint8_t run_value = 2;
  for (std::uint8_t b : bits) {
    out.push_back(b);
    if (run > 0 && b == run_value) {
      ++run;
    } else {
      run_value = b;
      run = 1;
    }
    if (run == 5) {
      const std::uint8_t stuffed = run_value ^ 1u;
      out.push_back(stuffed);
      run_value = stuffed;
      run = 1;
    }
  }
  return out;
}

UnstuffResult unstuff_bits(const BitString& bits) {
  UnstuffResult res;
  res.bits.reserve(bits.size());
  unsigned run = 0;
  std::uint8_t run_value = 2;
  for (std::size_t i = 0; i < bits.size(); ++i) {
    const std::uint8_t b = bits[i];
    if (run > 0 && b == run_value) {
      ++run;
    } else {
      run_value = b;
      run = 1;
    }
    if (run == 6) {
      return {BitString{}, false, i};
    }
    if (run == 5) {
      res.bits.push_back(b);
      if (i + 1 < bits.size()) {
        const std::uint8_t s = bits[i + 1];
        if (s == run_value) {
          return {BitString{}, false, i + 1};
        }
        ++i;
        run_value = s;
        run = 1;
      }
      continue;
    }
    res.bits.push_back(b);
  }
  return res;
}

BitString encode_frame(const CanFrame& frame) {
  if (!frame_valid(frame)) {
    throw CanError("invalid frame: " + frame_to_hex(frame));
  }
  BitString prefix = frame_prefix(frame);
  const std::uint16_t crc = crc15(prefix);
  append_value(prefix, crc, 15);

  BitString out = stuff_bits(prefix);
  out.push_back(1);  // CRC delimiter
  out.push_back(0);  // ACK slot, driven dominant by the receivers
  out.push_back(1);  // ACK delimiter
  for (std::size_t i = 0; i < kEofBits; ++i) out.push_back(1);
  return out;
}

DecodeResult decode_frame(const BitString& bits) {
  Destuffer in(bits);

  auto fail = [&](FrameError e, std::size_t pos) {
    DecodeResult r;
    r.error = e;
    r.error_pos = pos;
    return r;
  };
  auto read = [&](unsigned width, std::uint32_t& value) -> bool {
    value = 0;
    for (unsigned k = 0; k < width; ++k) {
      auto b = in.next();
      if (!b) return false;
      value = (value << 1) | *b;
    }
    return true;
  };
  auto propagate = [&]() {
    return in.stuff_error() ? fail(FrameError::Stuff, in.error_pos())
                            : fail(FrameError::Form, in.pos());
  };

  std::uint32_t sof, id, rtr, ide, r0, dlc;
  if (!read(1, sof)) return propagate();
  if (sof != 0) return fail(FrameError::Form, 0);
  if (!read(11, id) || !read(1, rtr) || !read(1, ide) || !read(1, r0) || !read(4, dlc)) {
    return propagate();
  }
  if (rtr != 0 || ide != 0 || dlc > 8) return fail(FrameError::Form, in.pos());

  CanFrame frame;
  frame.id = static_cast<std::uint16_t>(id);
  frame.dlc = static_cast<std::uint8_t>(dlc);
  BitString covered;
  covered.reserve(19 + 8 * dlc);
  covered.push_back(0);
  append_value(covered, id, 11);
  covered.push_back(static_cast<std::uint8_t>(rtr));
  covered.push_back(static_cast<std::uint8_t>(ide));
  covered.push_back(static_cast<std::uint8_t>(r0));
  append_value(covered, dlc, 4);

  for (unsigned i = 0; i < dlc; ++i) {
    std::uint32_t byte;
    if (!read(8, byte)) return propagate();
    frame.data[i] = static_cast<std::uint8_t>(byte);
    append_value(covered, byte, 8);
  }

  std::uint32_t crc_received;
  if (!read(15, crc_received)) return propagate();

  // Stuffing ends with the CRC field; the trailer is raw.
  std::size_t pos = in.pos();
  auto raw = [&](std::uint8_t& b) -> bool {
    if (pos >= bits.size()) return false;
    b = bits[pos++];
    return true;
  };
  std::uint8_t crc_delim, ack_slot, ack_delim;
  if (!raw(crc_delim) || !raw(ack_slot) || !raw(ack_delim)) {
    return fail(FrameError::Form, bits.size());
  }
  if (crc_delim != 1 || ack_delim != 1) return fail(FrameError::Form, pos - 1);
  for (std::size_t i = 0; i < kEofBits; ++i) {
    std::uint8_t b;
    if (!raw(b)) return fail(FrameError::Form, bits.size());
    if (b != 1) return fail(FrameError::Form, pos - 1);
  }
  if (pos != bits.size()) return fail(FrameError::Form, pos);

  if (crc15(covered) != crc_received) {
    return fail(FrameError::Crc, 0);
  }

  DecodeResult r;
  r.frame = frame;
  return r;
}

std::size_t encoded_bit_length(const CanFrame& frame) { return encode_frame(frame).size(); }

double frame_time_us(const CanFrame& frame, double bitrate_bps) {
  if (!(bitrate_bps > 0)) {
    throw CanError("bitrate must be positive");
  }
  const auto bits = static_cast<double>(encoded_bit_length(frame) + kIfsBits);
  return bits * 1e6 / bitrate_bps;
}

const PendingFrame& arbitrate(std::span<const PendingFrame> pending) {
  if (pending.empty()) {
    throw CanError("arbitration with no pending frames");
  }
  const PendingFrame* winner = &pending[0];
  for (const auto& p : pending.subspan(1)) {
    if (p.frame.id < winner->frame.id) winner = &p;
  }
  for (const auto& p : pending) {
    if (&p != winner && p.frame.id == winner->frame.id) {
      throw CanError("duplicate id 0x" + frame_to_hex(p.frame) + " in arbitration");
    }
  }
  return *winner;
}

static BridgeStatus bridge_status(const BridgeState& s) {
  BridgeStatus st;
  st.tx_pending = s.tx_pending;
  st.rx_full = s.rx.size() >= s.rx_capacity;
  st.rx_nonempty = !s.rx.empty();
  st.rx_dropped = s.rx_dropped;
  return st;
}

BridgeReply bridge_transfer(BridgeState& state, const BridgeCommand& cmd) {
  BridgeReply reply;
  switch (cmd.op) {
    case BridgeCommand::Op::LoadTx:
      if (!cmd.frame || !frame_valid(*cmd.frame)) {
        reply.ok = false;
        reply.error = "LOAD_TX with invalid frame";
        break;
      }
      if (state.tx_pending) {
        reply.ok = false;
        reply.error = "tx overrun: LOAD_TX while tx pending";
        break;
      }
      state.tx = *cmd.frame;
      break;
    case BridgeCommand::Op::Rts:
      if (!state.tx) {
        reply.ok = false;
        reply.error = "RTS with empty tx buffer";
        break;
      }
      state.tx_pending = true;
      break;
    case BridgeCommand::Op::ReadRx:
      if (!state.rx.empty()) {
        reply.frame = state.rx.front();
        state.rx.pop_front();
      }
      state.rx_full = state.rx.size() >= state.rx_capacity;
      break;
    case BridgeCommand::Op::ReadStatus:
      break;
    case BridgeCommand::Op::Reset:
      state.tx.reset();
      state.tx_pending = false;
      state.rx.clear();
      state.rx_full = false;
      state.rx_dropped = 0;
      break;
  }
  reply.status = bridge_status(state);
  return reply;
}

void bridge_deliver(BridgeState& state, const CanFrame& frame) {
  if (state.rx.size() >= state.rx_capacity) {
    ++state.rx_dropped;  // drop-newest
    state.rx_full = true;
    return;
  }
  state.rx.push_back(frame);
  state.rx_full = state.rx.size() >= state.rx_capacity;
}

CanBusSim::CanBusSim(double bitrate_bps) : bitrate_(bitrate_bps) {
  if (!(bitrate_bps > 0)) {
    throw CanError("bitrate must be positive");
  }
}

void CanBusSim::attach(const std::string& node_name, BridgeState* bridge) {
  for (const auto& n : nodes_) {
    if (n.name == node_name) throw CanError("node '" + node_name + "' already attached");
  }
  nodes_.push_back({node_name, bridge});
}

void CanBusSim::request_send(const std::string& node_name, Micros ready_at_us) {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].name == node_name) {
      if (!nodes_[i].bridge->tx_pending || !nodes_[i].bridge->tx) {
        throw CanError("request_send without a pending tx frame on '" + node_name + "'");
      }
      pending_.push_back({i, *nodes_[i].bridge->tx, ready_at_us});
      return;
    }
  }
  throw CanError("request_send from unattached node '" + node_name + "'");
}

bool CanBusSim::try_start(Micros now_us) {
  Micros earliest = 0;
  bool any = false;
  for (const auto& p : pending_) {
    if (p.ready_at_us <= now_us && (!any || p.ready_at_us < earliest)) {
      earliest = p.ready_at_us;
      any = true;
    }
  }
  if (!any) return false;
  const Micros start = std::max(busy_until_us_, earliest);

  std::vector<PendingFrame> contenders;
  std::vector<std::size_t> contender_pending_idx;
  for (std::size_t i = 0; i < pending_.size(); ++i) {
    if (pending_[i].ready_at_us <= start) {
      contenders.push_back({nodes_[pending_[i].sender_idx].name, pending_[i].frame});
      contender_pending_idx.push_back(i);
    }
  }
  const PendingFrame& winner = arbitrate(contenders);
  std::size_t win_i = 0;
  for (std::size_t i = 0; i < contenders.size(); ++i) {
    if (&contenders[i] == &winner) win_i = i;
  }
  const PendingTx chosen = pending_[contender_pending_idx[win_i]];
  pending_.erase(pending_.begin() +
                 static_cast<std::ptrdiff_t>(contender_pending_idx[win_i]));

  const auto duration =
      static_cast<Micros>(std::llround(frame_time_us(chosen.frame, bitrate_)));
  in_flight_ = InFlight{chosen.sender_idx, chosen.frame, start + duration};
  busy_until_us_ = start + duration;
  return true;
}

void CanBusSim::complete(const InFlight& f) {
  // ACK requires a second station; with fewer there is no receiver anyway.
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (i != f.sender_idx) {
      bridge_deliver(*nodes_[i].bridge, f.frame);
    }
  }
  BridgeState& sender = *nodes_[f.sender_idx].bridge;
  sender.tx.reset();
  sender.tx_pending = false;
  ++frames_delivered_;
  log_.push_back({f.completes_at_us, nodes_[f.sender_idx].name, f.frame});
}

void CanBusSim::tick(Micros now_us) {
  for (;;) {
    if (in_flight_ && in_flight_->completes_at_us <= now_us) {
      const InFlight f = *in_flight_;
      in_flight_.reset();
      complete(f);
      continue;
    }
    if (!in_flight_ && try_start(now_us)) {
      continue;
    }
    break;
  }
}

std::vector<CanBusSim::DeliveryRecord> CanBusSim::drain_log() {
  std::vector<DeliveryRecord> out;
  out.swap(log_);
  return out;
}

unsigned FrameSpec::total_bits() const {
  unsigned n = 0;
  for (const auto& f : fields) n += f.bits;
  return n;
}

CanFrame pack_record(const FrameSpec& spec, const std::map<std::string, double>& values) {
  if (spec.can_id >= (1u << 11)) throw CanError("frame spec id out of range");
  if (spec.fields.empty() || spec.total_bits() > 64) {
    throw CanError("frame spec must pack 1..64 bits");
  }
  std::uint64_t word = 0;
  unsigned pos = 0;
  for (const auto& f : spec.fields) {
    if (f.bits == 0 || f.bits > 64 || f.scale == 0.0) {
      throw CanError("bad field spec '" + f.name + "'");
    }
    auto it = values.find(f.name);
    if (it == values.end()) throw CanError("missing value for field '" + f.name + "'");
    const double lo = -std::ldexp(1.0, static_cast<int>(f.bits) - 1);
    const double hi = -lo - 1.0;
    double raw_d = std::round((it->second - f.offset) / f.scale);
    raw_d = std::clamp(raw_d, lo, hi);
    const auto raw = static_cast<std::int64_t>(raw_d);
    const std::uint64_t mask = (f.bits == 64) ? ~0ULL : ((1ULL << f.bits) - 1);
    word |= (static_cast<std::uint64_t>(raw) & mask) << pos;
    pos += f.bits;
  }
  CanFrame frame;
  frame.id = spec.can_id;
  frame.dlc = static_cast<std::uint8_t>((pos + 7) / 8);
  for (unsigned i = 0; i < frame.dlc; ++i) {
    frame.data[i] = static_cast<std::uint8_t>((word >> (8 * i)) & 0xFF);
  }
  return frame;
}

std::map<std::string, double> unpack_record(const FrameSpec& spec, const CanFrame& frame) {
  if (frame.id != spec.can_id) {
    throw CanError("frame id does not match spec");
  }
  std::uint64_t word = 0;
  for (unsigned i = 0; i < frame.dlc; ++i) {
    word |= static_cast<std::uint64_t>(frame.data[i]) << (8 * i);
  }
  std::map<std::string, double> out;
  unsigned pos = 0;
  for (const auto& f : spec.fields) {
    const std::uint64_t mask = (f.bits == 64) ? ~0ULL : ((1ULL << f.bits) - 1);
    std::uint64_t raw = (word >> pos) & mask;
    // sign extend
    if (f.bits < 64 && (raw & (1ULL << (f.bits - 1)))) {
      raw |= ~mask;
    }
    const auto sraw = static_cast<std::int64_t>(raw);
    out[f.name] = static_cast<double>(sraw) * f.scale + f.offset;
    pos += f.bits;
  }
  return out;
}

}  // namespace auv::can

#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace auv::can {

using Micros = std::int64_t;

class CanError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One bit per element, values 0 or 1, transmission order.
using BitString = std::vector<std::uint8_t>;

// CAN 2.0A data frame. Extended (29-bit) ids and remote frames are out of scope;
// rtr is carried so a decoded frame can be checked against the data-frame rule.
struct CanFrame {
  std::uint16_t id = 0;  // 11-bit
  std::uint8_t dlc = 0;  // 0..8
  std::array<std::uint8_t, 8> data{};
  bool rtr = false;

  friend bool operator==(const CanFrame& a, const CanFrame& b);
};

bool frame_valid(const CanFrame& f);
std::string frame_to_hex(const CanFrame& f);

// CRC-15/CAN: x^15 + x^14 + x^10 + x^8 + x^7 + x^4 + x^3 + 1, zero seed,
// bit-serial over the given bits.
std::uint16_t crc15(const BitString& bits);

// Insert the complement after every run of 5 identical bits; inserted stuff
// bits count toward later runs.
BitString stuff_bits(const BitString& bits);

struct UnstuffResult {
  BitString bits;
  bool ok = true;
  std::size_t error_pos = 0;  // index of the 6th identical bit, when !ok
};

// Inverse of stuff_bits on its image; six identical bits are a stuff violation.
UnstuffResult unstuff_bits(const BitString& bits);

// SOF | id(11) | RTR | IDE | r0 | DLC(4) | data | CRC(15), stuffed; then
// CRC delimiter, ACK slot, ACK delimiter, EOF(7) unstuffed.
BitString encode_frame(const CanFrame& frame);

enum class FrameError { None, Crc, Stuff, Form };

struct DecodeResult {
  std::optional<CanFrame> frame;
  FrameError error = FrameError::None;
  std::size_t error_pos = 0;
};

DecodeResult decode_frame(const BitString& bits);

// Encoded length including stuff bits (SOF..EOF, no interframe space).
std::size_t encoded_bit_length(const CanFrame& frame);

// Wire occupancy in microseconds: encoded bits plus the 3-bit interframe space.
double frame_time_us(const CanFrame& frame, double bitrate_bps);

struct PendingFrame {
  std::string node;
  CanFrame frame;
};

// Lowest id wins. Ids must be unique across contenders (enforced per config).
const PendingFrame& arbitrate(std::span<const PendingFrame> pending);

// SPI-bridged CAN controller, modeled behaviorally: one tx slot, a bounded rx
// queue with drop-newest overflow, and a handful of commands.
struct BridgeState {
  std::optional<CanFrame> tx;
  bool tx_pending = false;
  std::deque<CanFrame> rx;
  std::size_t rx_capacity = 8;
  bool rx_full = false;
  std::uint64_t rx_dropped = 0;
};

struct BridgeStatus {
  bool tx_pending = false;
  bool rx_full = false;
  bool rx_nonempty = false;
  std::uint64_t rx_dropped = 0;
};

struct BridgeCommand {
  enum class Op { LoadTx, Rts, ReadRx, ReadStatus, Reset };
  Op op;
  std::optional<CanFrame> frame;  // LoadTx only

  static BridgeCommand load_tx(const CanFrame& f) { return {Op::LoadTx, f}; }
  static BridgeCommand rts() { return {Op::Rts, std::nullopt}; }
  static BridgeCommand read_rx() { return {Op::ReadRx, std::nullopt}; }
  static BridgeCommand read_status() { return {Op::ReadStatus, std::nullopt}; }
  static BridgeCommand reset() { return {Op::Reset, std::nullopt}; }
};

struct BridgeReply {
  bool ok = true;
  std::string error;            // set when !ok (tx overrun, bad frame)
  std::optional<CanFrame> frame;  // ReadRx: popped frame, empty when queue empty
  BridgeStatus status;
};

BridgeReply bridge_transfer(BridgeState& state, const BridgeCommand& cmd);

// Frame received by the bridge side of the wire (bus delivery path).
void bridge_deliver(BridgeState& state, const CanFrame& frame);

// Shared-wire scheduler: one frame in flight, arbitration among tx-pending
// bridges, delivery to every other attached bridge at completion time.
class CanBusSim {
 public:
  explicit CanBusSim(double bitrate_bps = 1e6);

  void attach(const std::string& node_name, BridgeState* bridge);

  // Companion to the bridge RTS command: announces the loaded frame to the
  // wire. ready_at_us is when the controller raised the request; the frame
  // contends for the bus from then on.
  void request_send(const std::string& node_name, Micros ready_at_us);

  // Advance the wire to `now`: complete deliveries, start pending frames.
  // Multiple frames may complete within one call; timestamps stay exact.
  void tick(Micros now_us);

  double bitrate() const { return bitrate_; }
  Micros busy_until() const { return busy_until_us_; }
  std::uint64_t frames_delivered() const { return frames_delivered_; }

  // (completion time, sender, frame) of everything delivered, for the wire log.
  struct DeliveryRecord {
    Micros at_us;
    std::string sender;
    CanFrame frame;
  };
  std::vector<DeliveryRecord> drain_log();

 private:
  struct Attached {
    std::string name;
    BridgeState* bridge;
  };
  struct PendingTx {
    std::size_t sender_idx;
    CanFrame frame;
    Micros ready_at_us;
  };
  struct InFlight {
    std::size_t sender_idx;
    CanFrame frame;
    Micros completes_at_us;
  };

  bool try_start(Micros now_us);
  void complete(const InFlight& f);

  double bitrate_;
  std::vector<Attached> nodes_;
  std::vector<PendingTx> pending_;
  std::optional<InFlight> in_flight_;
  Micros busy_until_us_ = 0;
  std::uint64_t frames_delivered_ = 0;
  std::vector<DeliveryRecord> log_;
};

// Scenario message map: how a telemetry record rides a frame. Fields are
// signed two's-complement fixed point, packed LSB-first little-endian;
// engineering value = raw * scale + offset.
struct FieldSpec {
  std::string name;
  unsigned bits = 16;
  double scale = 1.0;
  double offset = 0.0;
};

struct FrameSpec {
  std::uint16_t can_id = 0;
  std::vector<FieldSpec> fields;

  unsigned total_bits() const;
};

CanFrame pack_record(const FrameSpec& spec, const std::map<std::string, double>& values);
std::map<std::string, double> unpack_record(const FrameSpec& spec, const CanFrame& frame);

}  // namespace auv::can

#pragma once

#include <any>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace auv::msgbus {

using Micros = std::int64_t;

class BusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A registered participant. Value type; equality by bus-assigned index.
struct NodeId {
  std::uint32_t index = 0;
  std::string name;

  friend bool operator==(const NodeId& a, const NodeId& b) { return a.index == b.index; }
};

struct Topic {
  std::string name;
  std::string schema_tag;
};

struct BusMessage {
  Topic topic;
  NodeId publisher;
  Micros stamp_us = 0;
  std::uint64_t seq = 0;  // per (publisher, topic), starts at 1
  std::any payload;

  template <typename T>
  const T& as() const {
    const T* p = std::any_cast<T>(&payload);
    if (p == nullptr) {
      throw BusError("payload type mismatch on topic '" + topic.name + "' (schema '" +
                     topic.schema_tag + "')");
    }
    return *p;
  }
};

using Handler = std::function<void(const BusMessage&)>;
using SubscriptionId = std::uint64_t;

// Deterministic in-process publish/subscribe bus. Delivery is synchronous and
// single-threaded: a publish invokes every live subscriber of the topic, in
// subscription order, before returning. No replay: a subscriber sees only
// messages published after its subscription. Cross-step transport delays are
// the link layer's job, never the bus's.
class Bus {
 public:
  Bus() = default;
  Bus(const Bus&) = delete;
  Bus& operator=(const Bus&) = delete;

  // Virtual clock, owned by the scenario loop. Must be non-decreasing.
  void advance_to(Micros now_us);
  Micros now() const { return now_us_; }

  NodeId register_node(const std::string& name);
  bool has_node(const std::string& name) const;

  SubscriptionId subscribe(const NodeId& node, const Topic& topic, Handler handler);
  void unsubscribe(SubscriptionId id);

  // Returns the message's per-(publisher, topic) sequence number.
  std::uint64_t publish(const NodeId& node, const Topic& topic, std::any payload);

  // Full delivery trace length so far (for determinism checks).
  std::uint64_t deliveries() const { return deliveries_; }

 private:
  struct Subscription {
    SubscriptionId id;
    Handler handler;
    bool live = true;
  };

  void check_node(const NodeId& node) const;
  // Pins the topic's schema on first use; throws on later disagreement.
  void check_schema(const Topic& topic);

  Micros now_us_ = 0;
  std::vector<std::string> node_names_;
  std::map<std::string, std::uint32_t> nodes_by_name_;
  std::map<std::string, std::string> topic_schemas_;
  std::map<std::string, std::vector<std::shared_ptr<Subscription>>> subs_by_topic_;
  std::map<std::pair<std::uint32_t, std::string>, std::uint64_t> seq_;
  SubscriptionId next_sub_id_ = 1;
  std::uint64_t deliveries_ = 0;
};

}  // namespace auv::msgbus

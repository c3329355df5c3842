#include "auv/msgbus.hpp"

#include <algorithm>

namespace auv::msgbus {

void Bus::advance_to(Micros now_us) {
  if (now_us < now_us_) {
    throw BusError("bus clock moved backwards");
  }
  now_us_ = now_us;
}

NodeId Bus::register_node(const std::string& name) {
  if (name.empty()) {
    throw BusError("node name must be non-empty");
  }
  if (nodes_by_name_.contains(name)) {
    throw BusError("duplicate node name '" + name + "'");
  }
  const auto index = static_cast<std::uint32_t>(node_names_.size());
  node_names_.push_back(name);
  nodes_by_name_.emplace(name, index);
  return NodeId{index, name};
}

bool Bus::has_node(const std::string& name) const { return nodes_by_name_.contains(name); }

void Bus::check_node(const NodeId& node) const {
  if (node.index >= node_names_.size() || node_names_[node.index] != node.name) {
    throw BusError("unknown node '" + node.name + "'");
  }
}

void Bus::check_schema(const Topic& topic) {
  if (topic.name.empty()) {
    throw BusError("topic name must be non-empty");
  }
  auto [it, inserted] = topic_schemas_.emplace(topic.name, topic.schema_tag);
  if (!inserted && it->second != topic.schema_tag) {
    throw BusError("schema mismatch on topic '" + topic.name + "': registered '" + it->second +
                   "', got '" + topic.schema_tag + "'");
  }
}

SubscriptionId Bus::subscribe(const NodeId& node, const Topic& topic, Handler handler) {
  check_node(node);
  check_schema(topic);
  if (!handler) {
    throw BusError("null handler for topic '" + topic.name + "'");
  }
  auto sub = std::make_shared<Subscription>();
  sub->id = next_sub_id_++;
  sub->handler = std::move(handler);
  subs_by_topic_[topic.name].push_back(sub);
  return sub->id;
}

void Bus::unsubscribe(SubscriptionId id) {
  for (auto& [topic, subs] : subs_by_topic_) {
    auto it = std::find_if(subs.begin(), subs.end(),
                           [id](const auto& s) { return s->id == id; });
    if (it != subs.end()) {
      (*it)->live = false;
      subs.erase(it);
      return;
    }
  }
  throw BusError("unknown subscription handle");
}

std::uint64_t Bus::publish(const NodeId& node, const Topic& topic, std::any payload) {
  check_node(node);
  check_schema(topic);

  auto& seq = seq_[{node.index, topic.name}];
  ++seq;

  BusMessage msg;
  msg.topic = topic;
  msg.publisher = node;
  msg.stamp_us = now_us_;
  msg.seq = seq;
  msg.payload = std::move(payload);

  auto it = subs_by_topic_.find(topic.name);
  if (it != subs_by_topic_.end()) {
    // Snapshot so handlers may subscribe/unsubscribe without perturbing this
    // delivery round; a subscription made mid-delivery sees only later messages.
    const auto snapshot = it->second;
    for (const auto& sub : snapshot) {
      if (sub->live) {
        sub->handler(msg);
        ++deliveries_;
      }
    }
  }
  return seq;
}

}  // namespace auv::msgbus

#pragma once

#include <string>

#include <json.hpp>

#include "coserve/peft_types.hpp"

namespace coserve {

using ojson = nlohmann::ordered_json;

inline const char* elem_kind_name(ElemKind k) {
  switch (k) {
    case ElemKind::Activation: return "activation";
    case ElemKind::Weight: return "weight";
    case ElemKind::Gradient: return "gradient";
    case ElemKind::Loss: return "loss";
  }
  return "?";
}

inline ElemKind elem_kind_from_name(const std::string& s) {
  if (s == "weight") return ElemKind::Weight;
  if (s == "gradient") return ElemKind::Gradient;
  if (s == "loss") return ElemKind::Loss;
  if (s == "activation") return ElemKind::Activation;
  throw std::invalid_argument("unknown element kind: " + s);
}

inline ojson tensor_to_json(const ParallelTensor& t) {
  ojson dims = ojson::array();
  for (const auto& d : t.dims) {
    ojson jd;
    jd["extent"] = d.extent;
    jd["state"] = std::string(1, state_symbol(d.state.kind));
    jd["degree"] = d.state.degree;
    dims.push_back(jd);
  }
  ojson j;
  j["id"] = t.id;
  j["kind"] = elem_kind_name(t.kind);
  if (!t.role.empty()) j["role"] = t.role;
  j["dims"] = dims;
  return j;
}

inline ParallelTensor tensor_from_json(const ojson& j) {
  ParallelTensor t;
  t.id = j.at("id").get<std::string>();
  t.kind = elem_kind_from_name(j.at("kind").get<std::string>());
  if (j.contains("role")) t.role = j.at("role").get<std::string>();
  for (const auto& jd : j.at("dims")) {
    TensorDim d;
    d.extent = jd.at("extent").get<long>();
    auto k = state_from_symbol(jd.at("state").get<std::string>());
    if (!k) throw std::invalid_argument("unknown dim state: " + jd.at("state").dump());
    d.state.kind = *k;
    d.state.degree = jd.at("degree").get<int>();
    t.dims.push_back(d);
  }
  return t;
}

inline ojson op_to_json(const OperatorNode& o) {
  ojson j;
  j["id"] = o.id;
  j["kind"] = op_kind_name(o.kind);
  j["inputs"] = o.inputs;
  j["outputs"] = o.outputs;
  j["trainable"] = o.trainable;
  if (o.kind == OpKind::Partition || o.kind == OpKind::Combine || o.kind == OpKind::Replicate)
    j["dim"] = o.dim;
  if (o.kind == OpKind::Partition || o.kind == OpKind::Replicate) j["degree"] = o.degree;
  return j;
}

inline OperatorNode op_from_json(const ojson& j) {
  OperatorNode o;
  o.id = j.at("id").get<std::string>();
  auto k = op_kind_from_name(j.at("kind").get<std::string>());
  if (!k) throw std::invalid_argument("unknown operator kind: " + j.at("kind").dump());
  o.kind = *k;
  o.inputs = j.at("inputs").get<std::vector<std::string>>();
  o.outputs = j.at("outputs").get<std::vector<std::string>>();
  o.trainable = j.value("trainable", false);
  o.dim = j.value("dim", 0);
  o.degree = j.value("degree", 1);
  return o;
}

inline ojson pcg_to_json(const Pcg& g) {
  ojson j;
  j["operators"] = ojson::array();
  for (const auto& o : g.ops) j["operators"].push_back(op_to_json(o));
  j["tensors"] = ojson::array();
  for (const auto& t : g.tensors) j["tensors"].push_back(tensor_to_json(t));
  if (!g.loss_tensor.empty()) j["loss_tensor"] = g.loss_tensor;
  return j;
}

inline Pcg pcg_from_json(const ojson& j) {
  Pcg g;
  for (const auto& jo : j.at("operators")) g.ops.push_back(op_from_json(jo));
  for (const auto& jt : j.at("tensors")) g.tensors.push_back(tensor_from_json(jt));
  g.loss_tensor = j.value("loss_tensor", "");
  // producer fields are derived, not stored
  for (auto& t : g.tensors) {
    const OperatorNode* p = g.producer_of(t.id);
    t.producer = p ? p->id : "";
  }
  return g;
}

inline const char* bypass_kind_name(BypassKind k) {
  switch (k) {
    case BypassKind::Lora: return "lora";
    case BypassKind::Adapter: return "adapter";
    case BypassKind::PrefixEmbedding: return "prefix_embedding";
    case BypassKind::Ia3: return "ia3";
  }
  return "?";
}

inline BypassKind bypass_kind_from_name(const std::string& s) {
  if (s == "lora") return BypassKind::Lora;
  if (s == "adapter") return BypassKind::Adapter;
  if (s == "prefix_embedding") return BypassKind::PrefixEmbedding;
  if (s == "ia3") return BypassKind::Ia3;
  throw std::invalid_argument("unknown bypass kind: " + s);
}

inline ojson bypass_to_json(const BypassNetwork& b) {
  ojson j;
  j["kind"] = bypass_kind_name(b.kind);
  j["attach_in"] = b.attach_in;
  j["attach_out"] = b.attach_out;
  j["output"] = b.output;
  j["operators"] = ojson::array();
  for (const auto& o : b.graph.ops) j["operators"].push_back(op_to_json(o));
  j["tensors"] = ojson::array();
  for (const auto& t : b.graph.tensors) j["tensors"].push_back(tensor_to_json(t));
  return j;
}

inline BypassNetwork bypass_from_json(const ojson& j) {
  BypassNetwork b;
  b.kind = bypass_kind_from_name(j.at("kind").get<std::string>());
  b.attach_in = j.at("attach_in").get<std::string>();
  b.attach_out = j.at("attach_out").get<std::string>();
  b.output = j.value("output", "");
  for (const auto& jo : j.at("operators")) b.graph.ops.push_back(op_from_json(jo));
  for (const auto& jt : j.at("tensors")) b.graph.tensors.push_back(tensor_from_json(jt));
  for (auto& t : b.graph.tensors) {
    const OperatorNode* p = b.graph.producer_of(t.id);
    t.producer = p ? p->id : "";
  }
  return b;
}

inline ojson peft_to_json(const PeftModel& m) {
  ojson j = pcg_to_json(m.backbone);
  j["bypasses"] = ojson::array();
  for (const auto& b : m.bypasses) j["bypasses"].push_back(bypass_to_json(b));
  return j;
}

inline PeftModel peft_from_json(const ojson& j) {
  PeftModel m;
  m.backbone = pcg_from_json(j);
  if (j.contains("bypasses"))
    for (const auto& jb : j.at("bypasses")) m.bypasses.push_back(bypass_from_json(jb));
  return m;
}

inline std::string serialize_peft(const PeftModel& m) { return peft_to_json(m).dump(2) + "\n"; }

inline PeftModel parse_peft(const std::string& text) {
  return peft_from_json(ojson::parse(text));
}

inline std::uint64_t content_hash(const PeftModel& m) {
  return content_hash_bytes(serialize_peft(m));
}

}  // namespace coserve

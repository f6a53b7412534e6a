#pragma once

#include "coserve/pcg.hpp"

namespace coserve {

enum class BypassKind { Lora, Adapter, PrefixEmbedding, Ia3 };

// Additive side network: reads one backbone tensor (attach_in), produces one
// output added to one backbone tensor (attach_out). Y = f_B(X) + f_A(X).
// All weights inside the bypass are trainable; backbone weights stay frozen.
struct BypassNetwork {
  BypassKind kind = BypassKind::Lora;
  Pcg graph;               // internal ops and tensors; inputs may reference attach_in
  std::string attach_in;   // backbone tensor id read by the bypass
  std::string attach_out;  // backbone tensor id the bypass output is added to
  std::string output;      // bypass-internal tensor holding f_A(X)

  bool operator==(const BypassNetwork&) const = default;
};

struct PeftModel {
  Pcg backbone;  // all weight-bearing ops frozen
  std::vector<BypassNetwork> bypasses;

  bool operator==(const PeftModel&) const = default;
};

inline long trainable_param_count(const BypassNetwork& b) {
  long n = 0;
  for (const auto& t : b.graph.tensors) {
    if (t.kind != ElemKind::Weight || t.role == "const") continue;
    const OperatorNode* consumer = nullptr;
    for (const auto& o : b.graph.ops)
      for (const auto& in : o.inputs)
        if (in == t.id) consumer = &o;
    if (consumer && consumer->trainable) n += t.elem_count();
  }
  return n;
}

}  // namespace coserve

#include "rlmpc/core_types.hpp"

namespace rlmpc {

const char* channel_name(Channel ch) {
  switch (ch) {
    case Channel::Imep: return "imep";
    case Channel::Nox: return "nox";
    case Channel::Mprr: return "mprr";
    case Channel::SoiDiesel: return "soi_diesel";
    case Channel::DoiDiesel: return "doi_diesel";
    case Channel::DoiHydrogen: return "doi_hydrogen";
  }
  throw ConfigError("unknown channel id " + std::to_string(static_cast<int>(ch)));
}

const ScalingTable::Range& ScalingTable::range(Channel ch) const {
  const int i = static_cast<int>(ch);
  if (i < 0 || i >= kNumChannels) {
    throw ConfigError("unknown channel id " + std::to_string(i));
  }
  return ranges[static_cast<std::size_t>(i)];
}

void ScalingTable::validate() const {
  for (int i = 0; i < kNumChannels; ++i) {
    const Range& r = ranges[static_cast<std::size_t>(i)];
    if (!(r.min < r.max)) {
      throw ConfigError(std::string("scaling range for ") +
                        channel_name(static_cast<Channel>(i)) +
                        " must have min < max");
    }
  }
}

AgentState build_agent_state(std::span<const CycleRecord> log, double ref_curr) {
  AgentState s;
  s.ref_imep_curr = ref_curr;
  if (log.empty()) {
    s.imep_prev = ref_curr;
    s.nox_prev = 0.0;
    s.mprr_prev = 0.0;
    s.ref_imep_prev = ref_curr;
  } else {
    const CycleRecord& last = log.back();
    s.imep_prev = last.output.imep;
    s.nox_prev = last.output.nox;
    s.mprr_prev = last.output.mprr;
    s.ref_imep_prev = last.ref_imep;
  }
  return s;
}

}  // namespace rlmpc

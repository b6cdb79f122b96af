#include "umic/recording.hpp"

#include <string>

#include "umic/error.hpp"

namespace umic {

void NodeRecording::validate() const {
  if (mic.size() != sync.size()) {
    throw ParameterError("node " + std::to_string(node_id) + ": mic and sync lengths differ (" +
                         std::to_string(mic.size()) + " vs " + std::to_string(sync.size()) + ")");
  }
  if (mic.sample_rate != sync.sample_rate || !(sync.sample_rate > 0.0)) {
    throw ParameterError("node " + std::to_string(node_id) + ": channel sample rates differ");
  }
}

NodeRecording NodeRecording::slice(std::size_t begin, std::size_t count) const {
  if (begin + count > size()) throw ParameterError("slice outside recording");
  NodeRecording out = *this;
  const double offset = static_cast<double>(begin) / sample_rate();
  out.mic.bits = mic.bits.slice(begin, count);
  out.sync.bits = sync.bits.slice(begin, count);
  out.sync.start_local = sync.start_local + offset;
  out.start_local = start_local + offset;
  out.first_sample_index = first_sample_index + begin;
  return out;
}

}  // namespace umic

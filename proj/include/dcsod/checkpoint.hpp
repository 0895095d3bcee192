#pragma once

// Parameter checkpoints: an 8-byte little-endian header length, a JSON header
// listing (name, shape, offset, count) per parameter, then one contiguous
// block of little-endian float32 values.

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dcsod/graph.hpp"

namespace dcsod {

inline constexpr int kCheckpointVersion = 1;

template <class S>
void save_checkpoint(const Network<S>& net, const std::string& path) {
  nlohmann::json header;
  header["schema_version"] = kCheckpointVersion;
  header["dtype"] = "f32";
  nlohmann::json plist = nlohmann::json::array();
  int64_t offset = 0;
  for (const Param<S>& p : net.params()) {
    nlohmann::json e;
    e["name"] = p.name;
    e["shape"] = p.value.shape;
    e["offset"] = offset;
    e["count"] = p.value.size();
    plist.push_back(e);
    offset += p.value.size();
  }
  header["params"] = plist;
  const std::string htext = header.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw prereq_error("cannot open checkpoint for writing: " + path);
  uint64_t hlen = htext.size();
  f.write(reinterpret_cast<const char*>(&hlen), 8);
  f.write(htext.data(), std::streamsize(htext.size()));
  std::vector<float> block;
  block.reserve(size_t(offset));
  for (const Param<S>& p : net.params())
    for (S x : p.value.v) block.push_back(float(x));
  f.write(reinterpret_cast<const char*>(block.data()), std::streamsize(block.size() * 4));
  if (!f) throw prereq_error("checkpoint write failed: " + path);
}

template <class S>
void load_checkpoint(Network<S>& net, const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw prereq_error("missing checkpoint: " + path);
  uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), 8);
  if (!f || hlen > (1u << 20)) throw prereq_error("corrupt checkpoint header: " + path);
  std::string htext(hlen, '\0');
  f.read(htext.data(), std::streamsize(hlen));
  if (!f) throw prereq_error("truncated checkpoint header: " + path);
  nlohmann::json header = nlohmann::json::parse(htext, nullptr, false);
  if (header.is_discarded()) throw prereq_error("corrupt checkpoint header: " + path);
  if (header.value("schema_version", -1) != kCheckpointVersion)
    throw prereq_error("unsupported checkpoint version in " + path);

  auto& params = net.params();
  const auto& plist = header.at("params");
  if (plist.size() != params.size())
    throw prereq_error("checkpoint parameter count mismatch: " + path);
  std::vector<float> block;
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& e = plist[i];
    if (e.at("name").get<std::string>() != params[i].name ||
        e.at("shape").get<std::vector<int>>() != params[i].value.shape)
      throw prereq_error("checkpoint layout mismatch at parameter " + params[i].name);
    int64_t count = e.at("count").get<int64_t>();
    block.resize(size_t(count));
    f.read(reinterpret_cast<char*>(block.data()), std::streamsize(count * 4));
    if (!f) throw prereq_error("truncated checkpoint payload: " + path);
    for (int64_t j = 0; j < count; ++j) params[i].value.v[size_t(j)] = S(block[size_t(j)]);
  }
}

}  // namespace dcsod

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "json.hpp"

#include "bmc/decode_sim.hpp"
#include "bmc/errors.hpp"

namespace bmc {

// One row of a sweep: a (policy, T) design point.
struct SweepPoint {
  std::string policy;
  std::uint64_t T = 0;
  std::uint64_t r = 0;
  double wall_s = 0.0;
  std::uint64_t copy_elems = 0;
  std::uint64_t append_elems = 0;
  std::uint64_t sdpa_macs = 0;
  std::uint64_t alloc_events = 0;
  double tokens_per_s = 0.0;
  double model_time_s = 0.0;

  friend bool operator==(const SweepPoint&, const SweepPoint&) = default;
};

struct SweepReport {
  nlohmann::json config = nlohmann::json::object();
  std::vector<SweepPoint> points;
};

inline constexpr std::string_view kCsvHeader =
    "policy,T,r,wall_s,copy_elems,append_elems,sdpa_macs,alloc_events,tokens_per_s,model_time_s";

inline void to_json(nlohmann::json& j, const SweepPoint& p) {
  j = nlohmann::json{{"policy", p.policy},           {"T", p.T},
                     {"r", p.r},                     {"wall_s", p.wall_s},
                     {"copy_elems", p.copy_elems},   {"append_elems", p.append_elems},
                     {"sdpa_macs", p.sdpa_macs},     {"alloc_events", p.alloc_events},
                     {"tokens_per_s", p.tokens_per_s}, {"model_time_s", p.model_time_s}};
}

inline void from_json(const nlohmann::json& j, SweepPoint& p) {
  j.at("policy").get_to(p.policy);
  j.at("T").get_to(p.T);
  j.at("r").get_to(p.r);
  j.at("wall_s").get_to(p.wall_s);
  j.at("copy_elems").get_to(p.copy_elems);
  j.at("append_elems").get_to(p.append_elems);
  j.at("sdpa_macs").get_to(p.sdpa_macs);
  j.at("alloc_events").get_to(p.alloc_events);
  j.at("tokens_per_s").get_to(p.tokens_per_s);
  j.at("model_time_s").get_to(p.model_time_s);
}

inline std::string report_to_json(const SweepReport& r) {
  nlohmann::json j;
  j["config"] = r.config;
  j["points"] = r.points;
  return j.dump(2) + "\n";
}

inline SweepReport report_from_json(std::string_view text) {
  const auto j = nlohmann::json::parse(text);
  SweepReport r;
  r.config = j.at("config");
  r.points = j.at("points").get<std::vector<SweepPoint>>();
  return r;
}

namespace detail {

template <typename T>
void append_number(std::string& out, T value) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, value);
  out.append(buf, res.ptr);
}

template <typename T>
T parse_number(std::string_view s) {
  T value{};
  const auto res = std::from_chars(s.data(), s.data() + s.size(), value);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw Error("malformed number in report: '" + std::string(s) + "'");
  }
  return value;
}

}  // namespace detail

// Shortest round-trip formatting, so parsing gives back identical values.
inline std::string report_to_csv(const SweepReport& r) {
  std::string out(kCsvHeader);
  out += '\n';
  for (const auto& p : r.points) {
    out += p.policy;
    for (auto v : {p.T, p.r}) {
      out += ',';
      detail::append_number(out, v);
    }
    out += ',';
    detail::append_number(out, p.wall_s);
    for (auto v : {p.copy_elems, p.append_elems, p.sdpa_macs, p.alloc_events}) {
      out += ',';
      detail::append_number(out, v);
    }
    out += ',';
    detail::append_number(out, p.tokens_per_s);
    out += ',';
    detail::append_number(out, p.model_time_s);
    out += '\n';
  }
  return out;
}

inline SweepReport report_from_csv(std::string_view text) {
  SweepReport r;
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) throw Error("CSV report header mismatch");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string_view> f;
    std::string_view rest(line);
    for (std::size_t pos; (pos = rest.find(',')) != std::string_view::npos; rest.remove_prefix(pos + 1)) {
      f.push_back(rest.substr(0, pos));
    }
    f.push_back(rest);
    if (f.size() != 10) throw Error("CSV report row has " + std::to_string(f.size()) + " fields");
    using detail::parse_number;
    r.points.push_back({std::string(f[0]), parse_number<std::uint64_t>(f[1]),
                        parse_number<std::uint64_t>(f[2]), parse_number<double>(f[3]),
                        parse_number<std::uint64_t>(f[4]), parse_number<std::uint64_t>(f[5]),
                        parse_number<std::uint64_t>(f[6]), parse_number<std::uint64_t>(f[7]),
                        parse_number<double>(f[8]), parse_number<double>(f[9])});
  }
  return r;
}

// Writes `content` to a sibling temp file and renames it over `path`.
inline void write_atomically(const std::filesystem::path& path, const std::string& content) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open " + tmp.string() + " for writing");
    f << content;
    if (!f.flush()) throw Error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline nlohmann::json dims_to_json(const ModelDims& d) {
  return {{"batch", d.batch},   {"layers", d.layers},           {"heads", d.heads},
          {"head_dim", d.head_dim}, {"hidden", d.hidden()},    {"max_context", d.max_context},
          {"groups", d.groups}};
}

inline nlohmann::json ledger_to_json(const CostLedger& l) {
  return {{"realloc_copy_elems", l.realloc_copy_elems},
          {"append_write_elems", l.append_write_elems},
          {"sdpa_macs", l.sdpa_macs},
          {"alloc_events", l.alloc_events},
          {"alloc_bytes", l.alloc_bytes}};
}

// Full per-iteration dump of one decode run.
inline nlohmann::json decode_report_to_json(const DecodeReport& r) {
  nlohmann::json iters = nlohmann::json::array();
  for (const auto& it : r.per_iteration) {
    iters.push_back({{"iter", it.index}, {"wall_s", it.wall_s}, {"realloc", it.realloc},
                     {"accepted", it.accepted}});
  }
  nlohmann::json policy{{"name", policy_name(r.policy)}};
  if (const auto* b = std::get_if<policy::Bmc>(&r.policy)) policy["chunk"] = b->chunk;
  return {{"dims", dims_to_json(r.dims)}, {"policy", policy},        {"seed", r.seed},
          {"tokens", r.tokens},           {"per_iteration", iters}, {"ledger", ledger_to_json(r.ledger)},
          {"wall_s", r.wall_s}};
}

}  // namespace bmc

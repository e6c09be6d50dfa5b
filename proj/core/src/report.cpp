// SPDX-License-Identifier: Apache-2.0
#include "dha/report.hpp"

#include <charconv>
#include <cmath>
#include <fstream>

#include "json.hpp"

#include "dha/errors.hpp"
#include "dha/fusion.hpp"

namespace dha {

namespace {

using json = nlohmann::ordered_json;

std::ofstream open_for_write(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  return out;
}

std::string blank_if_nan(double v) { return std::isnan(v) ? std::string() : format_number(v); }

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

void write_json(const std::filesystem::path& path, const json& j) {
  auto out = open_for_write(path);
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  auto out = open_for_write(path);
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
    out << '\n';
  };
  line(header);
  for (const auto& r : rows) {
    if (r.size() != header.size())
      throw DimensionError("csv row has " + std::to_string(r.size()) + " cells, header has " +
                           std::to_string(header.size()));
    line(r);
  }
  if (!out) throw IoError("failed writing " + path.string());
}

void ensure_directory(const std::filesystem::path& dir) {
  std::error_code ec;
  if (std::filesystem::exists(dir, ec)) {
    if (!std::filesystem::is_directory(dir, ec))
      throw IoError(dir.string() + " exists and is not a directory");
    return;
  }
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

void write_fusion_trace(const std::filesystem::path& path,
                        const std::vector<FusionTracePoint>& trace) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& p : trace) {
    rows.push_back({std::to_string(p.step), format_number(p.lm_loss),
                    format_number(p.fusion_loss), format_number(p.margin),
                    format_number(p.lambda)});
  }
  write_csv(path, {"step", "lm_loss", "fusion_loss", "margin", "lambda"}, rows);
}

void write_loss_curve(const std::filesystem::path& path, const std::vector<LossPoint>& curve) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& p : curve)
    rows.push_back({std::to_string(p.step), blank_if_nan(p.train_loss), blank_if_nan(p.val_loss)});
  write_csv(path, {"step", "train_loss", "val_loss"}, rows);
}

void write_similarity_csv(const std::filesystem::path& path, const SimilarityMatrix& sim) {
  const std::size_t n = sim.values.rows();
  std::vector<std::string> header{"head"};
  for (std::size_t j = 0; j < n; ++j) header.push_back(std::to_string(j));
  std::vector<std::vector<std::string>> rows;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::string> r{std::to_string(i)};
    for (std::size_t j = 0; j < n; ++j) r.push_back(format_number(sim.values(i, j)));
    rows.push_back(std::move(r));
  }
  write_csv(path, header, rows);
}

void write_redundancy_csv(const std::filesystem::path& path,
                          const std::vector<RedundancyRow>& rows) {
  std::vector<std::vector<std::string>> cells;
  for (const auto& r : rows) {
    cells.push_back({std::to_string(r.layer), format_number(r.query), format_number(r.key),
                     format_number(r.value)});
  }
  write_csv(path, {"layer", "q", "k", "v"}, cells);
}

void write_layer_losses(const std::filesystem::path& path, const SearchResult& search) {
  std::vector<std::vector<std::string>> rows;
  for (std::size_t l = 0; l < search.key.layer_losses.size(); ++l) {
    rows.push_back({std::to_string(l), format_number(search.key.layer_losses[l]),
                    format_number(search.value.layer_losses[l]),
                    std::to_string(search.key.budget[l]), std::to_string(search.value.budget[l])});
  }
  write_csv(path, {"layer", "key_loss", "value_loss", "key_heads", "value_heads"}, rows);
}

void write_search_report(const std::filesystem::path& path, const SearchResult& search,
                         ScoreMode mode) {
  auto kind_json = [](const KindSearch& ks, std::size_t l) {
    return json{{"loss", ks.layer_losses[l]},
                {"heads", ks.budget[l]},
                {"groups", ks.groups[l]},
                {"grouping_score", ks.group_scores[l]}};
  };
  json layers = json::array();
  for (std::size_t l = 0; l < search.key.layer_losses.size(); ++l) {
    layers.push_back(json{{"layer", l},
                          {"key", kind_json(search.key, l)},
                          {"value", kind_json(search.value, l)}});
  }
  std::size_t total = 0;
  for (std::size_t l = 0; l < search.key.budget.size(); ++l)
    total += search.key.budget[l] + search.value.budget[l];
  write_json(path, json{{"score_mode", to_string(mode)},
                        {"search_steps", search.steps},
                        {"kv_heads", total},
                        {"layers", layers}});
}

void write_compare_curve(const std::filesystem::path& path, const CompareResult& result) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& p : result.points)
    rows.push_back({std::to_string(p.step), format_number(p.dha_loss), format_number(p.gqa_loss)});
  write_csv(path, {"step", "dha_loss", "gqa_loss"}, rows);
}

std::vector<PhaseMetrics> transform_metrics(const ToyModel& mha, const TransformResult& result,
                                            const KvCacheSpec& spec) {
  const std::uint64_t mha_bytes = kv_cache_bytes(mha.config, mha.topology, spec);
  std::vector<PhaseMetrics> out;
  out.push_back({"mha", 0, result.mha_val_loss, std::numeric_limits<double>::quiet_NaN(),
                 mha_bytes, mha.parameter_count()});
  out.push_back({"search", result.search.steps, result.mha_val_loss,
                 std::numeric_limits<double>::quiet_NaN(), mha_bytes, mha.parameter_count()});
  const double fl = result.fusion.trace.empty() ? fusion_loss(result.fusion.op)
                                                : result.fusion.trace.back().fusion_loss;
  out.push_back({"fusion", result.fusion.steps_run, result.fusion.val_loss_after, fl, mha_bytes,
                 result.fusion.model.parameter_count()});
  const std::uint64_t dha_bytes =
      kv_cache_bytes(result.model.config, result.model.topology, spec);
  out.push_back({"continued_pretraining", result.ct.curve.empty() ? 0 : result.ct.curve.back().step,
                 result.ct.final_val_loss, std::numeric_limits<double>::quiet_NaN(), dha_bytes,
                 result.model.parameter_count()});
  return out;
}

void write_metrics(const std::filesystem::path& path, const std::vector<PhaseMetrics>& phases) {
  json arr = json::array();
  for (const auto& p : phases) {
    arr.push_back(json{{"phase", p.phase},
                       {"steps", p.steps},
                       {"lm_loss", number_or_null(p.lm_loss)},
                       {"fusion_loss", number_or_null(p.fusion_loss)},
                       {"kv_bytes", p.kv_bytes},
                       {"params", p.params}});
  }
  json j{{"phases", arr}};
  if (!phases.empty() && phases.front().kv_bytes > 0) {
    j["kv_bytes_ratio"] = static_cast<double>(phases.back().kv_bytes) /
                          static_cast<double>(phases.front().kv_bytes);
  }
  write_json(path, j);
}

}  // namespace dha

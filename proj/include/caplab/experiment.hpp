#pragma once
// Sweep plans over data knobs and training modes: validated plan files, a
// resumable cell runner backed by an on-disk ledger, and report emission.
//
// A plan's cell grid is points x modes x repeats. Derived seeds mix a purpose
// tag and the repeat index, never the mode or the point: modes that coincide
// algorithmically (clip vs clip_s:1) produce bitwise-equal rows, and points
// are paired replicates of one draw (the same images under different caption
// knobs, nested subsets under different sizes, one shared pool under the
// intervention arms). The scientific payload of a row (mu_tx and its interval)
// is a pure function of the plan; wall-clock seconds are bookkeeping and
// excluded from that claim.

#include <algorithm>
#include <atomic>
#include <cctype>
#include <charconv>
#include <chrono>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

#include "caplab/bytes.hpp"
#include "caplab/captionops.hpp"
#include "caplab/dataset_io.hpp"
#include "caplab/errors.hpp"
#include "caplab/evalkit.hpp"
#include "caplab/rng.hpp"
#include "caplab/trainer.hpp"
#include "caplab/world.hpp"

namespace caplab {
namespace experiment {

// ---------------------------------------------------------------------------
// Sweep axes and points
// ---------------------------------------------------------------------------

enum class SweepAxis {
    dataset_size,
    descriptiveness,
    variability_grid,
    captions_per_image,
    pairs_vs_captions,
    filter_intervention,
    paraphrase_intervention,
};

inline std::string to_string(SweepAxis axis) {
    switch (axis) {
        case SweepAxis::dataset_size: return "dataset_size";
        case SweepAxis::descriptiveness: return "descriptiveness";
        case SweepAxis::variability_grid: return "variability_grid";
        case SweepAxis::captions_per_image: return "captions_per_image";
        case SweepAxis::pairs_vs_captions: return "pairs_vs_captions";
        case SweepAxis::filter_intervention: return "filter_intervention";
        case SweepAxis::paraphrase_intervention: return "paraphrase_intervention";
    }
    throw ParameterError("to_string: unknown sweep axis");
}

inline SweepAxis parse_sweep_axis(const std::string& text) {
    for (const SweepAxis axis :
         {SweepAxis::dataset_size, SweepAxis::descriptiveness, SweepAxis::variability_grid,
          SweepAxis::captions_per_image, SweepAxis::pairs_vs_captions,
          SweepAxis::filter_intervention, SweepAxis::paraphrase_intervention}) {
        if (text == to_string(axis)) return axis;
    }
    throw ConfigError("unknown sweep_axis '" + text + "'");
}

// On these axes the point, not the mode string, carries the caption count;
// clip_s entries in the mode list must be written clip_s:1.
inline bool axis_sets_caption_count(SweepAxis axis) {
    return axis == SweepAxis::captions_per_image || axis == SweepAxis::pairs_vs_captions ||
           axis == SweepAxis::paraphrase_intervention;
}

// One point on a sweep axis. Only the fields the owning plan's axis reads are
// meaningful; the rest stay at their defaults.
struct SweepPoint {
    std::uint64_t n{0};       // dataset_size, pairs_vs_captions
    double delta{0.0};        // descriptiveness
    bool consistent{true};    // variability_grid
    bool complete{true};      // variability_grid
    std::uint64_t k{0};       // caption count axes
    std::string arm{};        // filter_intervention, paraphrase_intervention
    std::uint64_t budget{0};  // filter arm retained size

    bool operator==(const SweepPoint&) const = default;
};

namespace detail {

inline std::string format_double(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline bool try_parse_u64(std::string_view s, std::uint64_t& out) {
    if (s.empty()) return false;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
    return res.ec == std::errc{} && res.ptr == s.data() + s.size();
}

inline bool try_parse_double(std::string_view s, double& out) {
    if (s.empty()) return false;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
    return res.ec == std::errc{} && res.ptr == s.data() + s.size();
}

} // namespace detail

inline std::string axis_point_label(SweepAxis axis, const SweepPoint& p) {
    switch (axis) {
        case SweepAxis::dataset_size: return "n=" + std::to_string(p.n);
        case SweepAxis::descriptiveness: return "delta=" + detail::format_double(p.delta);
        case SweepAxis::variability_grid:
            return std::string(p.consistent ? "consistent" : "inconsistent") + "+" +
                   (p.complete ? "complete" : "incomplete");
        case SweepAxis::captions_per_image: return "k=" + std::to_string(p.k);
        case SweepAxis::pairs_vs_captions:
            return "n=" + std::to_string(p.n) + ",k=" + std::to_string(p.k);
        case SweepAxis::filter_intervention:
            return p.arm == "full" ? p.arm : p.arm + ":" + std::to_string(p.budget);
        case SweepAxis::paraphrase_intervention:
            return p.arm == "none" ? p.arm : p.arm + ":" + std::to_string(p.k);
    }
    throw ParameterError("axis_point_label: unknown sweep axis");
}

inline nlohmann::json point_to_json(SweepAxis axis, const SweepPoint& p) {
    switch (axis) {
        case SweepAxis::dataset_size: return p.n;
        case SweepAxis::descriptiveness: return p.delta;
        case SweepAxis::variability_grid:
            return {{"consistent", p.consistent}, {"complete", p.complete}};
        case SweepAxis::captions_per_image: return p.k;
        case SweepAxis::pairs_vs_captions: return {{"n", p.n}, {"k", p.k}};
        case SweepAxis::filter_intervention:
        case SweepAxis::paraphrase_intervention: return axis_point_label(axis, p);
    }
    throw ParameterError("point_to_json: unknown sweep axis");
}

inline SweepPoint point_from_json(SweepAxis axis, const nlohmann::json& j,
                                  const std::string& context) {
    SweepPoint p;
    switch (axis) {
        case SweepAxis::dataset_size:
            if (!j.is_number_unsigned() || j.get<std::uint64_t>() == 0)
                throw ConfigError(context + ": expected a positive example count");
            p.n = j.get<std::uint64_t>();
            return p;
        case SweepAxis::descriptiveness:
            if (!j.is_number()) throw ConfigError(context + ": expected a number");
            p.delta = j.get<double>();
            return p;
        case SweepAxis::variability_grid:
            world::require_exact_keys(j, {"consistent", "complete"}, context);
            if (!j.at("consistent").is_boolean() || !j.at("complete").is_boolean())
                throw ConfigError(context + ": consistent and complete must be booleans");
            p.consistent = j.at("consistent").get<bool>();
            p.complete = j.at("complete").get<bool>();
            return p;
        case SweepAxis::captions_per_image:
            if (!j.is_number_unsigned() || j.get<std::uint64_t>() == 0)
                throw ConfigError(context + ": expected a positive caption count");
            p.k = j.get<std::uint64_t>();
            return p;
        case SweepAxis::pairs_vs_captions:
            world::require_exact_keys(j, {"n", "k"}, context);
            if (!j.at("n").is_number_unsigned() || !j.at("k").is_number_unsigned())
                throw ConfigError(context + ": n and k must be positive integers");
            p.n = j.at("n").get<std::uint64_t>();
            p.k = j.at("k").get<std::uint64_t>();
            if (p.n == 0 || p.k == 0)
                throw ConfigError(context + ": n and k must be positive integers");
            return p;
        case SweepAxis::filter_intervention: {
            if (!j.is_string())
                throw ConfigError(context + ": expected full, random:<count> or filtered:<count>");
            const std::string s = j.get<std::string>();
            if (s == "full") {
                p.arm = "full";
                return p;
            }
            const auto colon = s.find(':');
            const std::string head = s.substr(0, colon);
            if (colon == std::string::npos || (head != "random" && head != "filtered") ||
                !detail::try_parse_u64(s.substr(colon + 1), p.budget) || p.budget == 0)
                throw ConfigError(context + ": expected full, random:<count> or filtered:<count>, got '" + s + "'");
            p.arm = head;
            return p;
        }
        case SweepAxis::paraphrase_intervention: {
            if (!j.is_string())
                throw ConfigError(context + ": expected none or paraphrase:<count>");
            const std::string s = j.get<std::string>();
            if (s == "none") {
                p.arm = "none";
                p.k = 1;
                return p;
            }
            const auto colon = s.find(':');
            if (colon == std::string::npos || s.substr(0, colon) != "paraphrase" ||
                !detail::try_parse_u64(s.substr(colon + 1), p.k) || p.k < 2)
                throw ConfigError(context + ": expected none or paraphrase:<count >= 2>, got '" + s + "'");
            p.arm = "paraphrase";
            return p;
        }
    }
    throw ParameterError("point_from_json: unknown sweep axis");
}

// ---------------------------------------------------------------------------
// Plans
// ---------------------------------------------------------------------------

struct PlanBase {
    world::UniverseConfig universe{};
    // dataset.seed and train.seed are the roots every cell derives from;
    // train.mode is a placeholder that each cell overrides with its own mode.
    world::DatasetSpec dataset{};
    trainer::TrainConfig train{};
    evalkit::ProbeConfig probe{};
    objective::EncoderConfig arch{};
};

struct ExperimentPlan {
    std::string name;
    SweepAxis sweep_axis{SweepAxis::dataset_size};
    std::vector<SweepPoint> points;
    std::vector<trainer::ContrastiveMode> modes;
    std::uint32_t repeats{1};
    PlanBase base;

    void validate() const {
        if (name.empty()) throw ConfigError("plan: name must be non-empty");
        for (const char c : name)
            if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' ||
                  c == '.'))
                throw ConfigError("plan: name may use letters, digits, '-', '_', '.' only");
        if (points.empty()) throw ConfigError("plan: points must be non-empty");
        if (modes.empty()) throw ConfigError("plan: modes must be non-empty");
        if (repeats < 1) throw ConfigError("plan: repeats must be >= 1");

        base.universe.validate();
        base.dataset.validate();
        base.train.validate();
        base.probe.validate();
        if (base.universe.embed_dim != base.arch.input_dim)
            throw ConfigError("plan: arch input_dim must match universe embed_dim");

        for (std::size_t i = 0; i < modes.size(); ++i) {
            modes[i].validate();
            for (std::size_t j = 0; j < i; ++j)
                if (modes[i] == modes[j])
                    throw ConfigError("plan: duplicate mode " + trainer::to_string(modes[i]));
        }

        if (axis_sets_caption_count(sweep_axis)) {
            for (const auto& mode : modes)
                if (mode.kind == trainer::ModeKind::clip_s && mode.captions_k != 1)
                    throw ConfigError(
                        "plan: on this axis the point sets the caption count; write clip_s:1");
        } else {
            for (const auto& mode : modes)
                if (mode.kind == trainer::ModeKind::clip_s &&
                    mode.captions_k > base.dataset.captions_per_image)
                    throw ConfigError("plan: clip_s:" + std::to_string(mode.captions_k) +
                                      " needs that many captions per image in the base dataset");
        }
        if (sweep_axis == SweepAxis::paraphrase_intervention &&
            base.dataset.captions_per_image != 1)
            throw ConfigError("plan: paraphrase sweeps start from one caption per image");
        if (sweep_axis != SweepAxis::dataset_size && sweep_axis != SweepAxis::pairs_vs_captions &&
            base.dataset.n < base.train.batch_size)
            throw ConfigError("plan: base dataset is smaller than one training batch");

        std::set<std::string> labels;
        std::uint64_t pair_product = 0;
        for (const auto& p : points) {
            switch (sweep_axis) {
                case SweepAxis::dataset_size:
                    if (p.n < base.train.batch_size)
                        throw ConfigError("plan: point n=" + std::to_string(p.n) +
                                          " is smaller than one training batch");
                    break;
                case SweepAxis::descriptiveness:
                    if (!(p.delta >= 0.0 && p.delta <= 1.0))
                        throw ConfigError("plan: delta points must lie in [0,1]");
                    break;
                case SweepAxis::variability_grid:
                case SweepAxis::captions_per_image:
                    break;
                case SweepAxis::pairs_vs_captions: {
                    if (p.n < base.train.batch_size)
                        throw ConfigError("plan: point n=" + std::to_string(p.n) +
                                          " is smaller than one training batch");
                    const std::uint64_t product = p.n * p.k;
                    if (pair_product == 0) pair_product = product;
                    if (product != pair_product)
                        throw ConfigError(
                            "plan: pairs_vs_captions points must hold n*k constant");
                    break;
                }
                case SweepAxis::filter_intervention:
                    if (p.arm != "full") {
                        if (p.budget < base.train.batch_size)
                            throw ConfigError("plan: filter budget " + std::to_string(p.budget) +
                                              " is smaller than one training batch");
                        if (p.budget > base.dataset.n)
                            throw ConfigError("plan: filter budget exceeds the base pool size");
                    }
                    break;
                case SweepAxis::paraphrase_intervention:
                    break;
            }
            if (!labels.insert(axis_point_label(sweep_axis, p)).second)
                throw ConfigError("plan: duplicate point " + axis_point_label(sweep_axis, p));
        }
    }
};

inline nlohmann::json to_json(const ExperimentPlan& plan) {
    nlohmann::json points = nlohmann::json::array();
    for (const auto& p : plan.points) points.push_back(point_to_json(plan.sweep_axis, p));
    nlohmann::json modes = nlohmann::json::array();
    for (const auto& m : plan.modes) modes.push_back(trainer::to_string(m));
    return {{"name", plan.name},
            {"sweep_axis", to_string(plan.sweep_axis)},
            {"points", points},
            {"modes", modes},
            {"repeats", plan.repeats},
            {"base",
             {{"universe", world::to_json(plan.base.universe)},
              {"dataset", world::to_json(plan.base.dataset)},
              {"train", trainer::to_json(plan.base.train)},
              {"probe", evalkit::to_json(plan.base.probe)},
              {"arch", trainer::to_json(plan.base.arch)}}}};
}

inline ExperimentPlan plan_from_json(const nlohmann::json& j, const std::string& context) {
    world::require_exact_keys(j, {"name", "sweep_axis", "points", "modes", "repeats", "base"},
                              context);
    ExperimentPlan plan;
    try {
        plan.name = j.at("name").get<std::string>();
        plan.sweep_axis = parse_sweep_axis(j.at("sweep_axis").get<std::string>());
        const auto& points = j.at("points");
        if (!points.is_array()) throw ConfigError(context + ".points: expected an array");
        for (std::size_t i = 0; i < points.size(); ++i)
            plan.points.push_back(point_from_json(plan.sweep_axis, points[i],
                                                  context + ".points[" + std::to_string(i) + "]"));
        const auto& modes = j.at("modes");
        if (!modes.is_array()) throw ConfigError(context + ".modes: expected an array");
        for (const auto& m : modes)
            plan.modes.push_back(trainer::parse_mode(m.get<std::string>()));
        plan.repeats = j.at("repeats").get<std::uint32_t>();
        const auto& base = j.at("base");
        world::require_exact_keys(base, {"universe", "dataset", "train", "probe", "arch"},
                                  context + ".base");
        plan.base.universe =
            world::universe_config_from_json(base.at("universe"), context + ".base.universe");
        plan.base.dataset =
            world::dataset_spec_from_json(base.at("dataset"), context + ".base.dataset");
        plan.base.train = trainer::train_config_from_json(base.at("train"), context + ".base.train");
        plan.base.probe = evalkit::probe_config_from_json(base.at("probe"), context + ".base.probe");
        plan.base.arch = trainer::encoder_config_from_json(base.at("arch"), context + ".base.arch");
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(context + ": " + e.what());
    }
    plan.validate();
    return plan;
}

inline ExperimentPlan load_plan(const std::string& path) {
    const std::string text = bytes::read_file_bytes(path, "plan file");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("plan file " + path + ": " + e.what());
    }
    return plan_from_json(j, "plan file " + path);
}

// ---------------------------------------------------------------------------
// Result rows
// ---------------------------------------------------------------------------

struct ResultRow {
    std::string plan;
    std::string axis;  // canonical point label
    std::string mode;  // mode string as configured in the plan
    std::uint64_t seed{0};  // replicate index within the plan
    double mu_tx{0.0};
    double ci_low{0.0};
    double ci_high{0.0};
    double seconds{0.0};
    bool failed{false};
    std::string error{};  // single line; empty unless failed

    bool operator==(const ResultRow&) const = default;
};

inline nlohmann::json to_json(const ResultRow& r) {
    return {{"plan", r.plan},     {"axis", r.axis},
            {"mode", r.mode},     {"seed", r.seed},
            {"mu_tx", r.mu_tx},   {"ci_low", r.ci_low},
            {"ci_high", r.ci_high}, {"seconds", r.seconds},
            {"status", r.failed ? "failed" : "ok"}, {"error", r.error}};
}

inline ResultRow row_from_json(const nlohmann::json& j, const std::string& context) {
    world::require_exact_keys(j,
                              {"plan", "axis", "mode", "seed", "mu_tx", "ci_low", "ci_high",
                               "seconds", "status", "error"},
                              context);
    ResultRow r;
    try {
        r.plan = j.at("plan").get<std::string>();
        r.axis = j.at("axis").get<std::string>();
        r.mode = j.at("mode").get<std::string>();
        r.seed = j.at("seed").get<std::uint64_t>();
        r.mu_tx = j.at("mu_tx").get<double>();
        r.ci_low = j.at("ci_low").get<double>();
        r.ci_high = j.at("ci_high").get<double>();
        r.seconds = j.at("seconds").get<double>();
        const std::string status = j.at("status").get<std::string>();
        if (status != "ok" && status != "failed")
            throw SerializationError(context + ": status must be ok or failed");
        r.failed = status == "failed";
        r.error = j.at("error").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw SerializationError(context + ": " + e.what());
    }
    if (!r.failed && !r.error.empty())
        throw SerializationError(context + ": ok rows carry no error text");
    return r;
}

// ---------------------------------------------------------------------------
// Row serialization: csv and records (one JSON object per line)
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr std::string_view kCsvHeader =
    "plan,axis,mode,seed,mu_tx,ci_low,ci_high,seconds,status,error";

inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (const char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += '"';
    return out;
}

inline std::vector<std::string> csv_split_line(std::string_view line, const std::string& context) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0;; ++i) {
        if (i == line.size()) {
            if (quoted) throw SerializationError(context + ": unterminated quote");
            out.push_back(cur);
            return out;
        }
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur += c;
            }
        } else if (c == '"' && cur.empty()) {
            quoted = true;
        } else if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
}

inline std::vector<std::string_view> split_lines(std::string_view text) {
    std::vector<std::string_view> lines;
    std::size_t start = 0;
    while (start < text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        lines.push_back(text.substr(start, end - start));
        start = end + 1;
    }
    return lines;
}

} // namespace detail

inline std::string rows_to_csv(const std::vector<ResultRow>& rows) {
    std::string out{detail::kCsvHeader};
    out += '\n';
    for (const auto& r : rows) {
        out += detail::csv_escape(r.plan);
        out += ',';
        out += detail::csv_escape(r.axis);
        out += ',';
        out += detail::csv_escape(r.mode);
        out += ',';
        out += std::to_string(r.seed);
        out += ',';
        out += detail::format_double(r.mu_tx);
        out += ',';
        out += detail::format_double(r.ci_low);
        out += ',';
        out += detail::format_double(r.ci_high);
        out += ',';
        out += detail::format_double(r.seconds);
        out += ',';
        out += r.failed ? "failed" : "ok";
        out += ',';
        out += detail::csv_escape(r.error);
        out += '\n';
    }
    return out;
}

inline std::vector<ResultRow> rows_from_csv(const std::string& text, const std::string& context) {
    const auto lines = detail::split_lines(text);
    if (lines.empty() || lines[0] != detail::kCsvHeader)
        throw SerializationError(context + ": missing or unexpected csv header");
    std::vector<ResultRow> rows;
    for (std::size_t li = 1; li < lines.size(); ++li) {
        if (lines[li].empty()) continue;
        const std::string where = context + " line " + std::to_string(li + 1);
        const auto fields = detail::csv_split_line(lines[li], where);
        if (fields.size() != 10)
            throw SerializationError(where + ": expected 10 fields, got " +
                                     std::to_string(fields.size()));
        ResultRow r;
        r.plan = fields[0];
        r.axis = fields[1];
        r.mode = fields[2];
        if (!detail::try_parse_u64(fields[3], r.seed))
            throw SerializationError(where + ": bad seed '" + fields[3] + "'");
        if (!detail::try_parse_double(fields[4], r.mu_tx) ||
            !detail::try_parse_double(fields[5], r.ci_low) ||
            !detail::try_parse_double(fields[6], r.ci_high) ||
            !detail::try_parse_double(fields[7], r.seconds))
            throw SerializationError(where + ": bad numeric field");
        if (fields[8] != "ok" && fields[8] != "failed")
            throw SerializationError(where + ": status must be ok or failed");
        r.failed = fields[8] == "failed";
        r.error = fields[9];
        if (!r.failed && !r.error.empty())
            throw SerializationError(where + ": ok rows carry no error text");
        rows.push_back(std::move(r));
    }
    return rows;
}

inline std::string rows_to_records(const std::vector<ResultRow>& rows) {
    std::string out;
    for (const auto& r : rows) {
        out += to_json(r).dump();
        out += '\n';
    }
    return out;
}

inline std::vector<ResultRow> rows_from_records(const std::string& text,
                                                const std::string& context) {
    std::vector<ResultRow> rows;
    const auto lines = detail::split_lines(text);
    for (std::size_t li = 0; li < lines.size(); ++li) {
        if (lines[li].empty()) continue;
        const std::string where = context + " line " + std::to_string(li + 1);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(lines[li]);
        } catch (const nlohmann::json::parse_error& e) {
            throw SerializationError(where + ": " + e.what());
        }
        rows.push_back(row_from_json(j, where));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

enum class ReportFormat { table, csv, records };

inline ReportFormat parse_report_format(const std::string& text) {
    if (text == "table") return ReportFormat::table;
    if (text == "csv") return ReportFormat::csv;
    if (text == "records") return ReportFormat::records;
    throw ConfigError("unknown report format '" + text + "'");
}

/// Renders rows from a single plan. The table format groups columns by mode
/// and aggregates repeats per cell: the mean of the replicate means, with a
/// half-width spanning the envelope of the replicate intervals. Cells whose
/// replicates all failed render as an em dash.
inline std::string emit_report(const std::vector<ResultRow>& rows, ReportFormat format) {
    for (const auto& r : rows)
        if (r.plan != rows.front().plan)
            throw AggregationError("emit_report: rows mix plans '" + rows.front().plan +
                                   "' and '" + r.plan + "'");
    if (format == ReportFormat::csv) return rows_to_csv(rows);
    if (format == ReportFormat::records) return rows_to_records(rows);

    std::vector<std::string> axis_order, mode_order;
    std::map<std::pair<std::string, std::string>, std::vector<const ResultRow*>> cells;
    for (const auto& r : rows) {
        if (std::find(axis_order.begin(), axis_order.end(), r.axis) == axis_order.end())
            axis_order.push_back(r.axis);
        if (std::find(mode_order.begin(), mode_order.end(), r.mode) == mode_order.end())
            mode_order.push_back(r.mode);
        cells[{r.axis, r.mode}].push_back(&r);
    }

    const auto cell_text = [](const std::vector<const ResultRow*>& cell) -> std::string {
        double mean = 0.0;
        double low = std::numeric_limits<double>::infinity();
        double high = -std::numeric_limits<double>::infinity();
        std::size_t ok = 0;
        for (const auto* r : cell) {
            if (r->failed) continue;
            mean += r->mu_tx;
            low = std::min(low, r->ci_low);
            high = std::max(high, r->ci_high);
            ++ok;
        }
        if (ok == 0) return "—";
        return evalkit::format_mean_pm(mean / static_cast<double>(ok), (high - low) / 2.0);
    };

    std::map<std::pair<std::string, std::string>, std::string> texts;
    for (const auto& axis : axis_order)
        for (const auto& mode : mode_order) {
            const auto it = cells.find({axis, mode});
            texts[{axis, mode}] = it == cells.end() ? std::string{} : cell_text(it->second);
        }

    std::size_t axis_width = 4; // "axis"
    for (const auto& a : axis_order) axis_width = std::max(axis_width, a.size());
    std::vector<std::size_t> widths;
    for (const auto& mode : mode_order) {
        std::size_t w = mode.size();
        for (const auto& axis : axis_order) w = std::max(w, texts[{axis, mode}].size());
        widths.push_back(w);
    }

    const auto pad = [](const std::string& s, std::size_t w) {
        return s + std::string(w - std::min(w, s.size()), ' ');
    };
    std::string out = pad("axis", axis_width);
    for (std::size_t m = 0; m < mode_order.size(); ++m) {
        out += "  ";
        out += pad(mode_order[m], widths[m]);
    }
    out += '\n';
    for (const auto& axis : axis_order) {
        out += pad(axis, axis_width);
        for (std::size_t m = 0; m < mode_order.size(); ++m) {
            out += "  ";
            out += pad(texts[{axis, mode_order[m]}], widths[m]);
        }
        out += '\n';
    }
    return out;
}

// ---------------------------------------------------------------------------
// Running plans
// ---------------------------------------------------------------------------

inline std::string cell_id(const std::string& axis_label, const std::string& mode,
                           std::uint64_t repeat) {
    const auto sanitize = [](const std::string& s) {
        std::string out;
        for (const char c : s)
            out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' ||
                    c == '.')
                       ? c
                       : '-';
        return out;
    };
    return sanitize(axis_label) + "__" + sanitize(mode) + "__r" + std::to_string(repeat);
}

namespace detail {

inline std::uint64_t cell_seed(std::uint64_t root, std::string_view purpose,
                               std::uint64_t repeat) {
    return hash_combine(root, hash_str(purpose, repeat));
}

inline world::DatasetSpec cell_dataset_spec(const ExperimentPlan& plan, const SweepPoint& p) {
    world::DatasetSpec spec = plan.base.dataset;
    switch (plan.sweep_axis) {
        case SweepAxis::dataset_size: spec.n = p.n; break;
        case SweepAxis::descriptiveness: spec.knobs.delta = p.delta; break;
        case SweepAxis::variability_grid:
            spec.knobs.consistent = p.consistent;
            spec.knobs.complete = p.complete;
            break;
        case SweepAxis::captions_per_image:
            spec.captions_per_image = static_cast<std::uint32_t>(p.k);
            break;
        case SweepAxis::pairs_vs_captions:
            spec.n = p.n;
            spec.captions_per_image = static_cast<std::uint32_t>(p.k);
            break;
        case SweepAxis::filter_intervention:
        case SweepAxis::paraphrase_intervention:
            break; // the arm is applied after the pool is built
    }
    return spec;
}

inline constexpr std::size_t kFilterCorpusSize = 2000;
inline constexpr double kFilterNegativeDelta = 0.1;

// One filter per plan, shared by every filter-axis cell: trained to tell
// fully descriptive captions from mostly-noise ones.
inline captionops::NGramFilterModel plan_filter_model(const ExperimentPlan& plan,
                                                      const world::ObjectUniverse& universe) {
    const auto corpus = [&](double delta, const char* tag) {
        world::DatasetSpec spec = plan.base.dataset;
        spec.n = kFilterCorpusSize;
        spec.captions_per_image = 1;
        spec.knobs.delta = delta;
        spec.seed = hash_combine(plan.base.dataset.seed, hash_str(tag));
        const auto ds = world::build_dataset(spec, universe);
        std::vector<std::vector<std::string>> docs;
        docs.reserve(ds.examples.size());
        for (const auto& ex : ds.examples) docs.push_back(ex.captions[0]);
        return docs;
    };
    captionops::FilterTrainConfig cfg;
    cfg.seed = hash_combine(plan.base.dataset.seed, hash_str("filter_train"));
    return captionops::train_filter(corpus(1.0, "filter_pos"),
                                    corpus(kFilterNegativeDelta, "filter_neg"), cfg)
        .model;
}

inline world::Dataset apply_filter_arm(const captionops::NGramFilterModel& model,
                                       world::Dataset ds, const SweepPoint& p) {
    if (p.arm == "full") return ds;
    world::Dataset out;
    out.spec = ds.spec;
    out.universe_config = ds.universe_config;
    out.universe_hash = ds.universe_hash;
    if (p.arm == "random") {
        std::vector<std::size_t> idx(ds.examples.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        Rng rng = derive_stream(ds.spec.seed, "subset");
        rng.shuffle(idx);
        idx.resize(p.budget);
        std::sort(idx.begin(), idx.end());
        for (const auto i : idx) out.examples.push_back(std::move(ds.examples[i]));
    } else {
        out = captionops::filter_dataset(model, ds);
        if (out.examples.size() < p.budget)
            throw DataError("filter arm: only " + std::to_string(out.examples.size()) + " of " +
                            std::to_string(p.budget) + " requested examples pass the filter");
        out.examples.resize(p.budget);
    }
    out.spec.n = out.examples.size();
    return out;
}

inline void apply_paraphrase_arm(world::Dataset& ds, const world::ObjectUniverse& universe,
                                 const SweepPoint& p) {
    if (p.arm == "none") return;
    for (std::size_t i = 0; i < ds.examples.size(); ++i) {
        auto& ex = ds.examples[i];
        Rng rng = derive_stream(ds.spec.seed, "paraphrase", i);
        std::vector<std::vector<std::string>> captions;
        captions.reserve(p.k);
        captions.push_back(ex.captions[0]);
        for (std::uint64_t c = 1; c < p.k; ++c)
            captions.push_back(captionops::paraphrase(ex.captions[0], universe, rng));
        ex.captions = std::move(captions);
    }
    ds.spec.captions_per_image = static_cast<std::uint32_t>(p.k);
}

inline std::uint64_t effective_caption_count(const ExperimentPlan& plan, const SweepPoint& p) {
    switch (plan.sweep_axis) {
        case SweepAxis::captions_per_image:
        case SweepAxis::pairs_vs_captions: return p.k;
        case SweepAxis::paraphrase_intervention: return p.arm == "none" ? 1 : p.k;
        default: return plan.base.dataset.captions_per_image;
    }
}

struct CellRef {
    std::size_t point{0};
    std::size_t mode{0};
    std::uint64_t repeat{0};
    std::string label;
    std::string mode_str;
    std::string id;
};

inline ResultRow run_cell(const ExperimentPlan& plan, const world::ObjectUniverse& universe,
                          const std::vector<evalkit::TaskData>& suite,
                          const captionops::NGramFilterModel* filter_model,
                          const CellRef& cell) {
    ResultRow row;
    row.plan = plan.name;
    row.axis = cell.label;
    row.mode = cell.mode_str;
    row.seed = cell.repeat;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        const SweepPoint& point = plan.points[cell.point];
        world::DatasetSpec spec = cell_dataset_spec(plan, point);
        spec.seed = cell_seed(plan.base.dataset.seed, "data", cell.repeat);
        world::Dataset ds = world::build_dataset(spec, universe);
        if (plan.sweep_axis == SweepAxis::filter_intervention)
            ds = apply_filter_arm(*filter_model, std::move(ds), point);
        if (plan.sweep_axis == SweepAxis::paraphrase_intervention)
            apply_paraphrase_arm(ds, universe, point);

        trainer::TrainConfig tc = plan.base.train;
        tc.mode = plan.modes[cell.mode];
        if (tc.mode.kind == trainer::ModeKind::clip_s && axis_sets_caption_count(plan.sweep_axis))
            tc.mode.captions_k = static_cast<std::uint32_t>(effective_caption_count(plan, point));
        tc.seed = cell_seed(plan.base.train.seed, "train", cell.repeat);
        const auto model = trainer::train(ds, tc, plan.base.arch);

        const auto report = evalkit::evaluate_model(
            model, suite, plan.base.probe,
            cell_seed(plan.base.train.seed, "eval", cell.repeat), 1);
        row.mu_tx = report.mu_tx_mean;
        row.ci_low = report.mu_tx_low;
        row.ci_high = report.mu_tx_high;
    } catch (const Error& e) {
        row.failed = true;
        row.mu_tx = row.ci_low = row.ci_high = 0.0;
        row.error = e.what();
        for (auto& c : row.error)
            if (c == '\n') c = ' ';
    }
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return row;
}

inline void atomic_write(const std::filesystem::path& path, const std::string& data,
                         const std::string& what) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    bytes::write_file_bytes(tmp.string(), data, what);
    std::filesystem::rename(tmp, path);
}

} // namespace detail

/// Runs every (point, mode, repeat) cell of the plan, skipping cells already
/// recorded in out_dir/<name>/ledger.jsonl. Each cell's row is written to
/// cells/<id>.json (write-then-rename) before its ledger line, so the ledger
/// only ever names durable results. Failed cells (any library error) are
/// recorded and the run continues. Returns all rows in canonical cell order.
inline std::vector<ResultRow> run_plan(const ExperimentPlan& plan,
                                       const std::filesystem::path& out_dir,
                                       std::size_t workers = 1) {
    plan.validate();
    if (workers < 1) throw ParameterError("run_plan: workers must be >= 1");

    namespace fs = std::filesystem;
    const fs::path plan_dir = out_dir / plan.name;
    fs::create_directories(plan_dir / "cells");

    const nlohmann::json plan_json = to_json(plan);
    const fs::path plan_path = plan_dir / "plan.json";
    if (fs::exists(plan_path)) {
        nlohmann::json stored;
        try {
            stored = nlohmann::json::parse(bytes::read_file_bytes(plan_path.string(), "plan.json"));
        } catch (const std::exception&) {
            throw ConfigError("run_plan: unreadable plan.json under " + plan_dir.string());
        }
        if (stored != plan_json)
            throw ConfigError("run_plan: " + plan_dir.string() +
                              " holds a different plan; use a fresh out dir");
    } else {
        detail::atomic_write(plan_path, plan_json.dump(2) + "\n", "plan.json");
    }

    std::vector<detail::CellRef> cells;
    for (std::size_t pi = 0; pi < plan.points.size(); ++pi) {
        const std::string label = axis_point_label(plan.sweep_axis, plan.points[pi]);
        for (std::size_t mi = 0; mi < plan.modes.size(); ++mi) {
            const std::string mode_str = trainer::to_string(plan.modes[mi]);
            for (std::uint64_t r = 0; r < plan.repeats; ++r)
                cells.push_back({pi, mi, r, label, mode_str, cell_id(label, mode_str, r)});
        }
    }
    {
        std::set<std::string> ids;
        for (const auto& c : cells)
            if (!ids.insert(c.id).second)
                throw ConfigError("run_plan: cell id collision at " + c.id);
    }

    const fs::path ledger_path = plan_dir / "ledger.jsonl";
    std::map<std::string, ResultRow> done;
    if (fs::exists(ledger_path)) {
        const auto rows = rows_from_records(bytes::read_file_bytes(ledger_path.string(), "ledger"),
                                            "ledger " + ledger_path.string());
        for (const auto& r : rows) {
            if (r.plan != plan.name)
                throw ConfigError("run_plan: ledger row from foreign plan '" + r.plan + "'");
            done[cell_id(r.axis, r.mode, r.seed)] = r;
        }
        for (const auto& entry : done) {
            const auto match = std::find_if(cells.begin(), cells.end(),
                                            [&](const auto& c) { return c.id == entry.first; });
            if (match == cells.end())
                throw ConfigError("run_plan: ledger names unknown cell " + entry.first);
        }
    }

    std::vector<const detail::CellRef*> pending;
    for (const auto& c : cells)
        if (!done.count(c.id)) pending.push_back(&c);

    if (!pending.empty()) {
        const auto universe = world::make_universe(plan.base.universe);
        const auto suite = evalkit::suite_v1(
            universe, hash_combine(plan.base.train.seed, hash_str("suite")));
        std::unique_ptr<captionops::NGramFilterModel> filter_model;
        if (plan.sweep_axis == SweepAxis::filter_intervention)
            filter_model = std::make_unique<captionops::NGramFilterModel>(
                detail::plan_filter_model(plan, universe));

        std::ofstream ledger(ledger_path, std::ios::app | std::ios::binary);
        if (!ledger) throw SerializationError("run_plan: cannot open " + ledger_path.string());

        std::mutex mu;
        std::atomic<std::size_t> next{0};
        std::exception_ptr first_error;
        const auto work = [&]() {
            while (true) {
                const std::size_t i = next.fetch_add(1);
                if (i >= pending.size()) return;
                const detail::CellRef& cell = *pending[i];
                ResultRow row =
                    detail::run_cell(plan, universe, suite, filter_model.get(), cell);
                const std::lock_guard<std::mutex> lock(mu);
                detail::atomic_write(plan_dir / "cells" / (cell.id + ".json"),
                                     to_json(row).dump(2) + "\n", "cell result");
                ledger << to_json(row).dump() << '\n';
                ledger.flush();
                if (!ledger)
                    throw SerializationError("run_plan: ledger write failed at " + cell.id);
                done[cell.id] = std::move(row);
            }
        };
        const auto guarded = [&]() {
            try {
                work();
            } catch (...) {
                const std::lock_guard<std::mutex> lock(mu);
                if (!first_error) first_error = std::current_exception();
            }
        };
        const std::size_t width = std::min(workers, pending.size());
        if (width <= 1) {
            guarded();
        } else {
            std::vector<std::thread> pool;
            pool.reserve(width);
            for (std::size_t w = 0; w < width; ++w) pool.emplace_back(guarded);
            for (auto& t : pool) t.join();
        }
        if (first_error) std::rethrow_exception(first_error);
    }

    std::vector<ResultRow> rows;
    rows.reserve(cells.size());
    for (const auto& c : cells) rows.push_back(done.at(c.id));
    return rows;
}

} // namespace experiment
} // namespace caplab

// caplab command line. Verbs cover the library end to end: gen builds
// dataset files, train/probe run one model through the transfer harness,
// filter/paraphrase expose the caption interventions, plan run/report drive
// full sweeps. Global --seed/--workers/--out-dir apply to every verb.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "caplab/dataset_io.hpp"
#include "caplab/experiment.hpp"
#include "caplab/remote.hpp"

namespace {

namespace fs = std::filesystem;
using namespace caplab;

struct Global {
    std::uint64_t seed{1};
    std::size_t workers{1};
    std::string out_dir{"out"};
};

fs::path out_path(const Global& g, const std::string& name) {
    fs::create_directories(g.out_dir);
    return fs::path(g.out_dir) / name;
}

// --- gen --------------------------------------------------------------------

struct GenOpts {
    world::UniverseConfig universe;
    world::DatasetSpec spec;
    bool inconsistent{false};
    bool incomplete{false};
    bool free_templates{false};
    std::string out{"dataset.jsonl"};
};

void cmd_gen(const Global& g, GenOpts& o) {
    o.spec.knobs.consistent = !o.inconsistent;
    o.spec.knobs.complete = !o.incomplete;
    o.spec.knobs.fixed_template = !o.free_templates;
    o.spec.seed = g.seed;
    o.universe.validate();
    o.spec.validate();
    const world::ObjectUniverse universe = world::make_universe(o.universe);
    const world::Dataset ds = world::build_dataset(o.spec, universe);
    const fs::path path = out_path(g, o.out);
    world::save_dataset(ds, path.string());
    std::cout << "wrote " << ds.size() << " examples (" << o.universe.embed_dim
              << "-dim images, vocab " << universe.vocab_size() << ") to " << path.string()
              << "\n";
}

// --- train ------------------------------------------------------------------

struct TrainOpts {
    std::string data;
    std::string mode{"clip"};
    bool full{false};
    trainer::TrainConfig overrides;
    objective::EncoderConfig arch;
    std::string out{"model.ckpt"};
    CLI::Option* batch{nullptr};
    CLI::Option* epochs{nullptr};
    CLI::Option* warmup{nullptr};
    CLI::Option* lr{nullptr};
    CLI::Option* wd{nullptr};
    CLI::Option* temperature{nullptr};
};

void cmd_train(const Global& g, TrainOpts& o) {
    const world::Dataset ds = world::load_dataset(o.data);
    const trainer::ContrastiveMode mode = trainer::parse_mode(o.mode);
    trainer::TrainConfig tc = o.full ? trainer::default_config(mode) : trainer::desk_config(mode);
    if (o.batch->count()) tc.batch_size = o.overrides.batch_size;
    if (o.epochs->count()) tc.epochs = o.overrides.epochs;
    if (o.warmup->count()) tc.warmup_epochs = o.overrides.warmup_epochs;
    if (o.lr->count()) tc.lr = o.overrides.lr;
    if (o.wd->count()) tc.weight_decay = o.overrides.weight_decay;
    if (o.temperature->count()) tc.temperature = o.overrides.temperature;
    tc.seed = g.seed;

    objective::EncoderConfig arch = o.arch;
    arch.input_dim = ds.universe_config.embed_dim; // must match the data
    const trainer::TrainedModel model = trainer::train(ds, tc, arch);
    const fs::path path = out_path(g, o.out);
    trainer::save_checkpoint(model, path.string());
    std::cout << "trained " << trainer::to_string(tc.mode) << ": " << tc.epochs << " epochs, "
              << ds.size() << " examples, final loss " << model.loss_curve.back() << "\n";
    std::cout << "saved checkpoint to " << path.string() << "\n";
}

// --- probe ------------------------------------------------------------------

struct ProbeOpts {
    std::string model;
    std::string data;
    std::uint64_t suite_seed{11};
    bool desk{false};
    evalkit::ProbeConfig overrides;
    std::string report{"probe_report.json"};
    CLI::Option* epochs{nullptr};
    CLI::Option* batch{nullptr};
    CLI::Option* lr_grid{nullptr};
    CLI::Option* seeds{nullptr};
};

void cmd_probe(const Global& g, ProbeOpts& o) {
    const trainer::TrainedModel model = trainer::load_checkpoint(o.model);
    const world::Dataset ds = world::load_dataset(o.data);
    if (ds.universe_config.embed_dim != model.arch.input_dim)
        throw DimensionError("probe: dataset universe dim " +
                             std::to_string(ds.universe_config.embed_dim) +
                             " does not match model input dim " +
                             std::to_string(model.arch.input_dim));
    const world::ObjectUniverse universe = world::make_universe(ds.universe_config);

    evalkit::ProbeConfig cfg = o.desk ? evalkit::desk_probe_config() : evalkit::ProbeConfig{};
    if (o.epochs->count()) cfg.epochs = o.overrides.epochs;
    if (o.batch->count()) cfg.batch_size = o.overrides.batch_size;
    if (o.lr_grid->count()) cfg.lr_grid = o.overrides.lr_grid;
    if (o.seeds->count()) cfg.seeds = o.overrides.seeds;

    const auto suite = evalkit::suite_v1(universe, o.suite_seed);
    const evalkit::ProbeReport report =
        evalkit::evaluate_model(model, suite, cfg, g.seed, g.workers);
    std::cout << evalkit::format_report_table(report);
    const fs::path path = out_path(g, o.report);
    bytes::write_file_bytes(path.string(), evalkit::to_json(report).dump(2) + "\n",
                            "probe report");
    std::cout << "wrote " << path.string() << "\n";
}

// --- filter -----------------------------------------------------------------

struct FilterOpts {
    std::string data;
    std::string out{"filtered.jsonl"};
    std::string save_model;
    double threshold{0.5};
    std::uint64_t corpus_size{2000};
    double pos_delta{1.0};
    double neg_delta{0.1};
};

// Trains a fresh quality filter from the dataset's own universe (clean vs
// mostly-noise captions), then keeps the examples whose first caption passes.
void cmd_filter(const Global& g, FilterOpts& o) {
    const world::Dataset ds = world::load_dataset(o.data);
    const world::ObjectUniverse universe = world::make_universe(ds.universe_config);

    const auto corpus = [&](double delta, const char* tag) {
        world::DatasetSpec spec = ds.spec;
        spec.n = o.corpus_size;
        spec.captions_per_image = 1;
        spec.knobs.delta = delta;
        spec.seed = hash_combine(g.seed, hash_str(tag));
        const world::Dataset c = world::build_dataset(spec, universe);
        std::vector<std::vector<std::string>> docs;
        docs.reserve(c.examples.size());
        for (const auto& ex : c.examples) docs.push_back(ex.captions[0]);
        return docs;
    };
    captionops::FilterTrainConfig cfg;
    cfg.threshold = o.threshold;
    cfg.seed = hash_combine(g.seed, hash_str("filter_train"));
    const captionops::FilterTrainResult trained = captionops::train_filter(
        corpus(o.pos_delta, "filter_pos"), corpus(o.neg_delta, "filter_neg"), cfg);
    std::cout << "filter holdout accuracy " << trained.holdout_accuracy << " (train "
              << trained.train_size << ", holdout " << trained.holdout_size << ")\n";

    const world::Dataset kept = captionops::filter_dataset(trained.model, ds);
    const fs::path path = out_path(g, o.out);
    world::save_dataset(kept, path.string());
    std::cout << "kept " << kept.size() << " of " << ds.size() << " examples, wrote "
              << path.string() << "\n";
    if (!o.save_model.empty()) {
        const fs::path model_path = out_path(g, o.save_model);
        captionops::save_filter(trained.model, model_path.string());
        std::cout << "saved filter model to " << model_path.string() << "\n";
    }
}

// --- paraphrase -------------------------------------------------------------

struct ParaphraseOpts {
    std::string data;
    std::uint64_t index{0};
    std::uint32_t caption{0};
    int samples{1};
    bool remote{false};
    double temperature{0.0};
    std::string stop{"\n"};
};

void cmd_paraphrase(const Global& g, ParaphraseOpts& o) {
    const world::Dataset ds = world::load_dataset(o.data);
    if (o.index >= ds.examples.size())
        throw ParameterError("paraphrase: index " + std::to_string(o.index) +
                             " out of range, dataset has " + std::to_string(ds.size()) +
                             " examples");
    const world::Example& ex = ds.examples[o.index];
    if (o.caption >= ex.captions.size())
        throw ParameterError("paraphrase: caption " + std::to_string(o.caption) +
                             " out of range, example has " +
                             std::to_string(ex.captions.size()) + " captions");
    if (o.samples < 1) throw ParameterError("paraphrase: samples must be >= 1");
    const std::vector<std::string>& caption = ex.captions[o.caption];
    const world::ObjectUniverse universe = world::make_universe(ds.universe_config);
    std::cout << "input: " << world::join_tokens(caption) << "\n";

    if (o.remote) {
        const remote::EndpointConfig endpoint = remote::endpoint_from_env();
        remote::RemoteParaphraseClient client(endpoint);
        remote::ParaphraseRequest req;
        req.target = world::join_tokens(caption);
        req.context = remote::default_context_pairs(universe, g.seed);
        req.samples = o.samples;
        req.temperature = o.temperature;
        req.stop = o.stop;
        for (const auto& text : client.paraphrase(req)) std::cout << text << "\n";
        return;
    }
    Rng rng = derive_stream(g.seed, "paraphrase", o.index);
    for (int s = 0; s < o.samples; ++s)
        std::cout << world::join_tokens(captionops::paraphrase(caption, universe, rng)) << "\n";
}

// --- plan run / plan report -------------------------------------------------

struct PlanRunOpts {
    std::string plan;
    bool strict{false};
};

int cmd_plan_run(const Global& g, PlanRunOpts& o) {
    const experiment::ExperimentPlan plan = experiment::load_plan(o.plan);
    const auto rows = experiment::run_plan(plan, g.out_dir, g.workers);
    const fs::path plan_dir = fs::path(g.out_dir) / plan.name;

    bytes::write_file_bytes((plan_dir / "report.txt").string(),
                            experiment::emit_report(rows, experiment::ReportFormat::table),
                            "report");
    bytes::write_file_bytes((plan_dir / "report.csv").string(),
                            experiment::emit_report(rows, experiment::ReportFormat::csv),
                            "report");
    bytes::write_file_bytes((plan_dir / "report.jsonl").string(),
                            experiment::emit_report(rows, experiment::ReportFormat::records),
                            "report");

    std::size_t failed = 0;
    for (const auto& r : rows) failed += r.failed ? 1 : 0;
    nlohmann::json manifest = {
        {"plan", plan.name},
        {"sweep_axis", experiment::to_string(plan.sweep_axis)},
        {"cells", rows.size()},
        {"failed", failed},
        {"files",
         {{"plan", "plan.json"},
          {"ledger", "ledger.jsonl"},
          {"cells", "cells"},
          {"table", "report.txt"},
          {"csv", "report.csv"},
          {"records", "report.jsonl"}}}};
    bytes::write_file_bytes((plan_dir / "manifest.json").string(), manifest.dump(2) + "\n",
                            "manifest");

    std::cout << experiment::emit_report(rows, experiment::ReportFormat::table);
    std::cout << "plan " << plan.name << ": " << rows.size() << " cells, " << failed
              << " failed; outputs under " << plan_dir.string() << "\n";
    return (o.strict && failed > 0) ? 3 : 0;
}

struct PlanReportOpts {
    std::string plan;
    std::string format{"table"};
    std::string out;
};

void cmd_plan_report(const Global& g, PlanReportOpts& o) {
    const experiment::ExperimentPlan plan = experiment::load_plan(o.plan);
    const fs::path ledger = fs::path(g.out_dir) / plan.name / "ledger.jsonl";
    if (!fs::exists(ledger))
        throw ConfigError("plan report: no ledger at " + ledger.string() +
                          "; run `plan run` first");
    auto rows = experiment::rows_from_records(
        bytes::read_file_bytes(ledger.string(), "ledger"), "ledger " + ledger.string());
    for (const auto& r : rows)
        if (r.plan != plan.name)
            throw ConfigError("plan report: ledger row from foreign plan '" + r.plan + "'");
    const std::string text =
        experiment::emit_report(rows, experiment::parse_report_format(o.format));
    std::cout << text;
    if (!o.out.empty()) {
        const fs::path path = fs::path(g.out_dir) / plan.name / o.out;
        bytes::write_file_bytes(path.string(), text, "report");
        std::cerr << "wrote " << path.string() << "\n";
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"caplab: a desk-scale contrastive pre-training laboratory"};
    app.require_subcommand(1);
    Global g;
    app.add_option("--seed", g.seed, "root seed for the verb's randomness")
        ->capture_default_str();
    app.add_option("--workers", g.workers, "worker threads for probe and plan run")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    app.add_option("--out-dir", g.out_dir, "directory for all outputs")->capture_default_str();

    int exit_code = 0;

    auto* gen = app.add_subcommand("gen", "generate a synthetic dataset file");
    gen->fallthrough();
    auto gen_opts = std::make_shared<GenOpts>();
    gen->add_option("--objects", gen_opts->universe.num_objects, "universe object count")
        ->capture_default_str();
    gen->add_option("--dim", gen_opts->universe.embed_dim, "image embedding width")
        ->capture_default_str();
    gen->add_option("--synonyms", gen_opts->universe.synonyms_per_object,
                    "synonyms per object")
        ->capture_default_str();
    gen->add_option("--templates", gen_opts->universe.num_templates, "caption template count")
        ->capture_default_str();
    gen->add_option("--noise-vocab", gen_opts->universe.noise_vocab_size,
                    "noise vocabulary size")
        ->capture_default_str();
    gen->add_option("--universe-seed", gen_opts->universe.seed, "universe construction seed")
        ->capture_default_str();
    gen->add_option("--n", gen_opts->spec.n, "example count")->capture_default_str();
    gen->add_option("--captions", gen_opts->spec.captions_per_image, "captions per image")
        ->capture_default_str();
    gen->add_option("--delta", gen_opts->spec.knobs.delta,
                    "descriptiveness: content token survival probability")
        ->capture_default_str();
    gen->add_option("--mention-prob", gen_opts->spec.knobs.mention_prob,
                    "object mention probability under --incomplete")
        ->capture_default_str();
    gen->add_option("--sigma", gen_opts->spec.image_noise_sigma, "image noise sigma")
        ->capture_default_str();
    gen->add_flag("--inconsistent", gen_opts->inconsistent,
                  "draw a fresh synonym at every mention");
    gen->add_flag("--incomplete", gen_opts->incomplete,
                  "mention objects with probability --mention-prob");
    gen->add_flag("--free-templates", gen_opts->free_templates,
                  "draw a caption template per caption");
    gen->add_option("--out", gen_opts->out, "output file name under --out-dir")
        ->capture_default_str();
    gen->callback([&g, gen_opts]() { cmd_gen(g, *gen_opts); });

    auto* train = app.add_subcommand("train", "train a contrastive model on a dataset file");
    train->fallthrough();
    auto train_opts = std::make_shared<TrainOpts>();
    train->add_option("--data", train_opts->data, "dataset file from gen")
        ->required()
        ->check(CLI::ExistingFile);
    train->add_option("--mode", train_opts->mode, "simclr, clip or clip_s:<K>")
        ->capture_default_str();
    train->add_flag("--full", train_opts->full,
                    "start from the published full-scale defaults instead of desk scale");
    train_opts->batch = train->add_option("--batch", train_opts->overrides.batch_size,
                                          "batch size override");
    train_opts->epochs = train->add_option("--epochs", train_opts->overrides.epochs,
                                           "epoch count override");
    train_opts->warmup = train->add_option("--warmup", train_opts->overrides.warmup_epochs,
                                           "warmup epoch override");
    train_opts->lr = train->add_option("--lr", train_opts->overrides.lr,
                                       "peak learning rate override");
    train_opts->wd = train->add_option("--wd", train_opts->overrides.weight_decay,
                                       "weight decay override");
    train_opts->temperature = train->add_option(
        "--temperature", train_opts->overrides.temperature, "softmax temperature override");
    train->add_option("--hidden", train_opts->arch.hidden_width, "encoder hidden width")
        ->capture_default_str();
    train->add_option("--feature-dim", train_opts->arch.feature_dim,
                      "encoder output width (probe features)")
        ->capture_default_str();
    train->add_option("--proj-dim", train_opts->arch.proj_dim, "projection head output width")
        ->capture_default_str();
    train->add_option("--token-dim", train_opts->arch.text_token_dim,
                      "text token embedding width")
        ->capture_default_str();
    train->add_option("--out", train_opts->out, "checkpoint file name under --out-dir")
        ->capture_default_str();
    train->callback([&g, train_opts]() { cmd_train(g, *train_opts); });

    auto* probe = app.add_subcommand("probe", "linear-probe a checkpoint on the task suite");
    probe->fallthrough();
    auto probe_opts = std::make_shared<ProbeOpts>();
    probe->add_option("--model", probe_opts->model, "checkpoint file from train")
        ->required()
        ->check(CLI::ExistingFile);
    probe->add_option("--data", probe_opts->data,
                      "dataset file whose universe the suite is built over")
        ->required()
        ->check(CLI::ExistingFile);
    probe->add_option("--suite-seed", probe_opts->suite_seed, "task suite generation seed")
        ->capture_default_str();
    probe->add_flag("--desk", probe_opts->desk, "desk-scale probe preset");
    probe_opts->epochs = probe->add_option("--probe-epochs", probe_opts->overrides.epochs,
                                           "probe epoch override");
    probe_opts->batch = probe->add_option("--probe-batch", probe_opts->overrides.batch_size,
                                          "probe batch size override");
    probe_opts->lr_grid =
        probe->add_option("--lr-grid", probe_opts->overrides.lr_grid,
                          "probe learning rate grid override (comma separated)")
            ->delimiter(',');
    probe_opts->seeds = probe->add_option("--probe-seeds", probe_opts->overrides.seeds,
                                          "probe seed count override");
    probe->add_option("--report", probe_opts->report, "report file name under --out-dir")
        ->capture_default_str();
    probe->callback([&g, probe_opts]() { cmd_probe(g, *probe_opts); });

    auto* filter = app.add_subcommand(
        "filter", "train a caption quality filter and keep the passing examples");
    filter->fallthrough();
    auto filter_opts = std::make_shared<FilterOpts>();
    filter->add_option("--data", filter_opts->data, "dataset file from gen")
        ->required()
        ->check(CLI::ExistingFile);
    filter->add_option("--out", filter_opts->out, "filtered dataset file name under --out-dir")
        ->capture_default_str();
    filter->add_option("--save-model", filter_opts->save_model,
                       "also save the filter model under --out-dir");
    filter->add_option("--threshold", filter_opts->threshold, "keep score threshold")
        ->capture_default_str();
    filter->add_option("--corpus-size", filter_opts->corpus_size,
                       "training corpus size per class")
        ->capture_default_str();
    filter->add_option("--pos-delta", filter_opts->pos_delta, "positive corpus delta")
        ->capture_default_str();
    filter->add_option("--neg-delta", filter_opts->neg_delta, "negative corpus delta")
        ->capture_default_str();
    filter->callback([&g, filter_opts]() { cmd_filter(g, *filter_opts); });

    auto* para = app.add_subcommand("paraphrase", "paraphrase one caption from a dataset file");
    para->fallthrough();
    auto para_opts = std::make_shared<ParaphraseOpts>();
    para->add_option("--data", para_opts->data, "dataset file from gen")
        ->required()
        ->check(CLI::ExistingFile);
    para->add_option("--index", para_opts->index, "example index")->capture_default_str();
    para->add_option("--caption", para_opts->caption, "caption index within the example")
        ->capture_default_str();
    para->add_option("--samples", para_opts->samples, "paraphrases to produce")
        ->capture_default_str();
    auto* remote_flag = para->add_flag("--remote", para_opts->remote,
                                       "use the endpoint from CAPLAB_PARAPHRASE_ENDPOINT");
    auto* temp_opt = para->add_option("--temperature", para_opts->temperature,
                                      "remote sampling temperature");
    para->add_option("--stop", para_opts->stop, "remote stop sequence (default: newline)");
    remote_flag->needs(temp_opt);
    temp_opt->needs(remote_flag);
    para->callback([&g, para_opts]() { cmd_paraphrase(g, *para_opts); });

    auto* plan = app.add_subcommand("plan", "experiment plan verbs");
    plan->require_subcommand(1);
    plan->fallthrough();

    auto* plan_run = plan->add_subcommand("run", "execute every cell of a plan");
    plan_run->fallthrough();
    auto run_opts = std::make_shared<PlanRunOpts>();
    plan_run->add_option("--plan", run_opts->plan, "plan file")
        ->required()
        ->check(CLI::ExistingFile);
    plan_run->add_flag("--strict", run_opts->strict, "exit 3 when any cell failed");
    plan_run->callback(
        [&g, run_opts, &exit_code]() { exit_code = cmd_plan_run(g, *run_opts); });

    auto* plan_report = plan->add_subcommand("report", "render a finished plan's rows");
    plan_report->fallthrough();
    auto report_opts = std::make_shared<PlanReportOpts>();
    plan_report->add_option("--plan", report_opts->plan, "plan file")
        ->required()
        ->check(CLI::ExistingFile);
    plan_report->add_option("--format", report_opts->format, "table, csv or records")
        ->capture_default_str();
    plan_report->add_option("--out", report_opts->out,
                            "also write the report under the plan directory");
    plan_report->callback([&g, report_opts]() { cmd_plan_report(g, *report_opts); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const Error& e) {
        std::cerr << "caplab: " << e.what() << "\n";
        return 2;
    }
    return exit_code;
}

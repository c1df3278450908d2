// seqshort: dataset generation, training, evaluation, explanation export and
// FLOPs benchmarking from the command line.
//
// Exit codes: 0 success, 2 usage/config/data error, 3 numerical failure.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>

#include "seqshort/seqshort.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace seqshort;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumerical = 3;

void write_text(const fs::path& path, const std::string& text) {
    io::write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

json model_config_json(const ModelConfig& cfg) {
    const auto& s = cfg.seqshort;
    const auto& e = cfg.encoder;
    return {{"seqshort",
             {{"input_dim", s.input_dim},
              {"hidden_dim", s.hidden_dim},
              {"num_heads", s.num_heads},
              {"output_len", s.output_len},
              {"bias", s.bias}}},
            {"encoder",
             {{"num_layers", e.num_layers},
              {"num_heads", e.num_heads},
              {"hidden_dim", e.hidden_dim},
              {"ffn_dim", e.ffn_dim},
              {"num_classes", e.num_classes},
              {"seq_len", e.seq_len},
              {"positional_embeddings", e.use_positional_embeddings},
              {"head_hidden_layer", e.head_hidden_layer},
              {"cls_first", e.cls_first},
              {"freeze_policy", std::string(to_string(e.freeze_policy))},
              {"layer_norm_eps", e.layer_norm_eps}}}};
}

// Every option of a subcommand as INI text, defaults included.
std::string resolved_flags(const CLI::App& app) { return app.config_to_str(true, false); }

bool parse_on_off(const std::string& flag, const std::string& value) {
    if (value == "on") return true;
    if (value == "off") return false;
    throw ConfigError(flag + " expects on or off, got '" + value + "'");
}

// ---------------------------------------------------------------------------
// Model flags shared by train and bench.

struct ModelFlags {
    std::size_t hidden = 64;
    std::size_t queries = 8;
    std::size_t seqshort_heads = 2;
    std::string seqshort_bias = "off";
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t ffn = 256;
    std::string pos_embeddings = "on";
    std::string head_hidden = "off";
    std::string cls_position = "first";
    std::string freeze = "none";

    void add(CLI::App& app) {
        app.add_option("--hidden", hidden, "Hidden width h shared by SeqShort and the encoder")->capture_default_str();
        app.add_option("--queries", queries, "Number of learned queries S")->capture_default_str();
        app.add_option("--seqshort-heads", seqshort_heads, "SeqShort attention heads k")->capture_default_str();
        app.add_option("--seqshort-bias", seqshort_bias, "Bias terms in the SeqShort projections (on|off)")
            ->capture_default_str();
        app.add_option("--layers", layers, "Encoder blocks L")->capture_default_str();
        app.add_option("--heads", heads, "Encoder attention heads")->capture_default_str();
        app.add_option("--ffn", ffn, "Encoder feed-forward width")->capture_default_str();
        app.add_option("--pos-embeddings", pos_embeddings, "Learned positional embeddings (on|off)")
            ->capture_default_str();
        app.add_option("--head-hidden", head_hidden, "Hidden GELU layer in the classifier head (on|off)")
            ->capture_default_str();
        app.add_option("--cls-position", cls_position, "Where [CLS] sits in the sequence (first|last)")
            ->capture_default_str();
        app.add_option("--freeze", freeze, "Freeze policy (none|frozen_except_layernorm)")->capture_default_str();
    }

    ModelConfig resolve(std::size_t input_dim, std::size_t num_classes) const {
        ModelConfig cfg;
        cfg.seqshort = {input_dim, hidden, seqshort_heads, queries, parse_on_off("--seqshort-bias", seqshort_bias)};
        cfg.encoder.num_layers = layers;
        cfg.encoder.num_heads = heads;
        cfg.encoder.hidden_dim = hidden;
        cfg.encoder.ffn_dim = ffn;
        cfg.encoder.num_classes = num_classes;
        cfg.encoder.seq_len = queries;
        cfg.encoder.use_positional_embeddings = parse_on_off("--pos-embeddings", pos_embeddings);
        cfg.encoder.head_hidden_layer = parse_on_off("--head-hidden", head_hidden);
        if (cls_position != "first" && cls_position != "last") {
            throw ConfigError("--cls-position expects first or last, got '" + cls_position + "'");
        }
        cfg.encoder.cls_first = cls_position == "first";
        cfg.encoder.freeze_policy = parse_freeze_policy(freeze);
        cfg.validate();
        return cfg;
    }
};

// ---------------------------------------------------------------------------
// gen

struct GenArgs {
    SyntheticTaskSpec spec;
    std::size_t bags = 200;
    std::optional<std::size_t> witnesses;
    double val_fraction = 0.1;
    fs::path out;
};

int run_gen(const GenArgs& a, const CLI::App& app) {
    SyntheticTaskSpec spec = a.spec;
    if (a.witnesses) spec.witness_min = spec.witness_max = *a.witnesses;
    spec.validate();
    if (a.bags == 0 || a.bags % spec.num_classes != 0) {
        throw ConfigError("--bags " + std::to_string(a.bags) + " must be a positive multiple of --classes " +
                          std::to_string(spec.num_classes));
    }
    if (!(a.val_fraction > 0.0 && a.val_fraction < 1.0)) throw ConfigError("--val-fraction must lie in (0, 1)");
    const json echo = {{"command", "gen"}, {"flags", resolved_flags(app)}};
    const auto generated = generate_synthetic(spec, a.bags / spec.num_classes, a.out, a.val_fraction, echo);
    const auto counts_train = generated.manifest.filter("train").class_counts();
    const auto counts_val = generated.manifest.filter("val").class_counts();
    std::cout << "wrote " << generated.manifest.entries.size() << " bags to " << a.out.string() << " (train "
              << json(counts_train).dump() << ", val " << json(counts_val).dump() << ")\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
    fs::path manifest;
    fs::path out;
    std::string preset = "toy";
    std::optional<std::size_t> epochs, warmup, cycles, batch;
    std::optional<double> lr;
    std::uint64_t seed = 0;
    std::uint64_t model_seed = 0;
    ModelFlags model;
};

int run_train(const TrainArgs& a, const CLI::App& app) {
    TrainConfig cfg = TrainConfig::from_preset(a.preset);
    if (a.epochs) cfg.epochs = *a.epochs;
    if (a.warmup) cfg.warmup_epochs = *a.warmup;
    if (a.cycles) cfg.cosine_cycles = *a.cycles;
    if (a.batch) cfg.batch_size = *a.batch;
    if (a.lr) cfg.max_lr = *a.lr;
    cfg.seed = a.seed;
    cfg.validate();

    const auto manifest = manifest_read(a.manifest, true);
    const ModelConfig mc = a.model.resolve(manifest.feature_dim, manifest.num_classes);
    ClassifierModel<float> model(mc, a.model_seed);

    TrainOptions options;
    options.checkpoint = a.out / "model.sqck";
    const auto report = train(model, manifest, cfg, options);

    json out = report.to_json();
    out["config"] = {{"model", model_config_json(mc)},
                     {"train", cfg.to_json()},
                     {"model_seed", a.model_seed},
                     {"manifest", a.manifest.string()},
                     {"flags", resolved_flags(app)}};
    out["ablation"] = {{"positional_embeddings", mc.encoder.use_positional_embeddings}};
    write_text(a.out / "report.json", out.dump(2) + "\n");
    std::printf("trained %zu epochs: final val AUROC %.4f, trainable %zu / %zu parameters\n", cfg.epochs,
                report.final_val_auroc, report.trainable_parameters, report.total_parameters);
    if (!mc.encoder.use_positional_embeddings) std::printf("ablation: positional embeddings disabled\n");
    return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
    fs::path checkpoint;
    fs::path manifest;
    std::string split = "val";
    fs::path out;
};

int run_eval(const EvalArgs& a, const CLI::App& app) {
    const auto model = checkpoint_load<float>(a.checkpoint);
    const auto manifest = manifest_read(a.manifest, true);
    const auto subset = a.split == "all" ? manifest : manifest.filter(a.split);
    if (subset.entries.empty()) throw DataError("split '" + a.split + "' is empty");
    const auto result = evaluate(model, load_bags(subset));
    json out = {{"split", a.split},
                {"bags", subset.entries.size()},
                {"auroc_macro", result.auroc.macro},
                {"auroc_per_class", result.auroc.per_class},
                {"class_counts", result.class_counts},
                {"mean_loss", result.mean_loss},
                {"config",
                 {{"model", model_config_json(model.config())},
                  {"checkpoint", a.checkpoint.string()},
                  {"manifest", a.manifest.string()},
                  {"flags", resolved_flags(app)}}}};
    const std::string text = out.dump(2) + "\n";
    if (a.out.empty()) {
        std::cout << text;
    } else {
        write_text(a.out, text);
        std::printf("%s AUROC %.4f over %zu bags\n", a.split.c_str(), result.auroc.macro, subset.entries.size());
    }
    return 0;
}

// ---------------------------------------------------------------------------
// explain

struct ExplainArgs {
    fs::path checkpoint;
    std::vector<fs::path> bags;
    fs::path manifest;
    std::string split = "val";
    std::vector<std::size_t> queries;
    bool sort = false;
    fs::path out;
};

int run_explain(const ExplainArgs& a, const CLI::App& app) {
    const auto model = checkpoint_load<float>(a.checkpoint);
    const auto& mc = model.config();
    std::vector<BagRecord> bags;
    std::vector<std::string> sources;
    for (const auto& path : a.bags) {
        bags.push_back(bag_read(path));
        sources.push_back(path.string());
    }
    if (!a.manifest.empty()) {
        const auto manifest = manifest_read(a.manifest);
        const auto subset = a.split == "all" ? manifest : manifest.filter(a.split);
        for (const auto& e : subset.entries) {
            bags.push_back(bag_read(subset.resolve(e)));
            bags.back().label = e.label;
            sources.push_back(e.path.generic_string());
        }
    }
    if (bags.empty()) throw DataError("explain: no bags given (use --bag or --manifest)");
    for (const auto q : a.queries) {
        if (q >= mc.seqshort.output_len) {
            throw ConfigError("--query " + std::to_string(q) + " is out of range for S=" +
                              std::to_string(mc.seqshort.output_len));
        }
    }

    json per_bag = json::array();
    for (std::size_t i = 0; i < bags.size(); ++i) {
        const auto& bag = bags[i];
        if (bag.dim() != mc.seqshort.input_dim) {
            throw DataError(sources[i] + ": feature dim " + std::to_string(bag.dim()) + " does not match the model");
        }
        const auto result = model.forward(to_model_dtype<float>(bag.features));
        const auto rolled = rollout(result.trace, mc.encoder.num_layers);
        const std::string stem = bag.id.empty() ? "bag_" + std::to_string(i) : bag.id;
        heatmap_export(rolled.cls_heatmap, bag.coords, a.out / (stem + "_rollout"));
        const Tensor<double> avg = result.trace.seqshort_attn.head_average();
        for (const auto q : a.queries) {
            const auto row = avg.row(q);
            heatmap_export(std::vector<double>(row.begin(), row.end()), bag.coords,
                           a.out / (stem + "_query" + std::to_string(q)));
        }
        per_bag.push_back({{"id", bag.id}, {"source", sources[i]}, {"label", bag.label}, {"instances", bag.size()},
                           {"cls_mass", rolled.cls_mass}});
    }
    const auto profile = entropy_profile(model, bags, a.sort);
    write_entropy_csv(profile, a.out / "entropy.csv");
    json meta = {{"bags", per_bag},
                 {"entropy_sorted", a.sort},
                 {"config",
                  {{"model", model_config_json(mc)},
                   {"checkpoint", a.checkpoint.string()},
                   {"flags", resolved_flags(app)}}}};
    write_text(a.out / "explain.json", meta.dump(2) + "\n");
    std::printf("explained %zu bag(s) into %s\n", bags.size(), a.out.string().c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// bench

struct BenchArgs {
    std::string scale = "full";
    std::vector<std::size_t> lengths{512, 1024, 2048, 4096, 8192, 16384};
    std::size_t input_dim = 1280;
    std::size_t classes = 2;
    bool time = false;
    std::size_t repeats = 5;
    fs::path out;
    ModelFlags model;
};

int run_bench(const BenchArgs& a, const CLI::App& app) {
    ModelConfig mc;
    if (a.scale == "full") {
        mc = ModelConfig::full_pipeline(a.input_dim, 256, a.classes);
    } else if (a.scale == "custom") {
        mc = a.model.resolve(a.input_dim, a.classes);
    } else {
        throw ConfigError("--scale expects full or custom, got '" + a.scale + "'");
    }
    mc.validate();
    if (a.lengths.empty()) throw ConfigError("--lengths must list at least one bag size");
    std::optional<ClassifierModel<float>> model;
    if (a.time) model.emplace(mc, 0);

    std::ostringstream csv;
    csv << "M,seqshort_flops,encoder_flops,total_flops,baseline_flops,median_ms\n";
    for (const auto m : a.lengths) {
        const auto f = flops_forward(mc, m);
        csv << m << ',' << f.seqshort_flops << ',' << f.encoder_flops << ',' << f.total << ','
            << flops_full_attention_baseline(mc, m) << ',';
        if (model) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.6g", timeit_forward(*model, m, a.repeats, m).median_ms);
            csv << buf;
        }
        csv << '\n';
    }
    if (a.out.empty()) {
        std::cout << csv.str();
        return 0;
    }
    write_text(a.out, csv.str());
    auto sidecar = a.out;
    sidecar += ".json";
    const json meta = {{"config", {{"model", model_config_json(mc)}, {"flags", resolved_flags(app)}}},
                       {"flop_convention", "matmul only, multiply-add counted as 2"}};
    write_text(sidecar, meta.dump(2) + "\n");
    std::printf("wrote %zu rows to %s\n", a.lengths.size(), a.out.string().c_str());
    return 0;
}

// CLI11 only reads config files for the top-level app, so a subcommand's
// --config is expanded into flags here. Flags given on the command line win.
std::vector<std::string> config_args(const CLI::App& sub, const std::string& path) {
    std::vector<std::string> out;
    for (const auto& item : CLI::ConfigINI().from_file(path)) {
        if (item.name == "++" || item.name == "--") continue;  // section open/close markers
        if (!item.parents.empty() && item.parents != std::vector<std::string>{sub.get_name()}) {
            throw ConfigError(path + ": section [" + item.parents.front() + "] does not belong to '" +
                              sub.get_name() + "'");
        }
        if (item.name == "config") throw ConfigError(path + ": config files cannot include other config files");
        const CLI::Option* opt = sub.get_option_no_throw("--" + item.name);
        if (opt == nullptr) throw ConfigError(path + ": unknown key '" + item.name + "' for '" + sub.get_name() + "'");
        if (opt->count() > 0) continue;
        for (const auto& value : item.inputs) out.push_back("--" + item.name + "=" + value);
    }
    return out;
}

template <class Fn>
int guarded(Fn&& fn) {
    try {
        return fn();
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const ZeroMassError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"SeqShort multiple-instance classifier toolkit"};
    app.require_subcommand(1);

    GenArgs gen;
    auto* gen_cmd = app.add_subcommand("gen", "Generate a synthetic witness-bag dataset");
    gen_cmd->add_option("--classes", gen.spec.num_classes, "Number of classes C")->capture_default_str();
    gen_cmd->add_option("--dim", gen.spec.feature_dim, "Feature dimension d")->capture_default_str();
    gen_cmd->add_option("--bags", gen.bags, "Total bags, split evenly across classes")->capture_default_str();
    gen_cmd->add_option("--bag-min", gen.spec.bag_min, "Smallest bag size")->capture_default_str();
    gen_cmd->add_option("--bag-max", gen.spec.bag_max, "Largest bag size")->capture_default_str();
    gen_cmd->add_option("--witnesses", gen.witnesses, "Witness instances per bag (sets min and max)");
    gen_cmd->add_option("--witness-min", gen.spec.witness_min, "Fewest witnesses per bag")->capture_default_str();
    gen_cmd->add_option("--witness-max", gen.spec.witness_max, "Most witnesses per bag")->capture_default_str();
    gen_cmd->add_option("--shift", gen.spec.witness_shift, "Witness mean offset along the class axis")
        ->capture_default_str();
    gen_cmd->add_option("--noise-std", gen.spec.noise_std, "Instance noise standard deviation")->capture_default_str();
    gen_cmd->add_option("--seed", gen.spec.seed, "Generator and split seed")->capture_default_str();
    gen_cmd->add_option("--val-fraction", gen.val_fraction, "Stratified validation fraction")->capture_default_str();
    gen_cmd->add_option("--out", gen.out, "Output directory")->required();

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "Train a classifier on a manifest's train/val splits");
    train_cmd->add_option("--manifest", tr.manifest, "Dataset manifest CSV")->required();
    train_cmd->add_option("--out", tr.out, "Output directory for model.sqck and report.json")->required();
    train_cmd->add_option("--preset", tr.preset, "Training preset (toy|lnm|subtype)")->capture_default_str();
    train_cmd->add_option("--epochs", tr.epochs, "Override the preset's epoch count");
    train_cmd->add_option("--warmup", tr.warmup, "Override the preset's warmup epochs");
    train_cmd->add_option("--cycles", tr.cycles, "Override the preset's cosine cycles");
    train_cmd->add_option("--batch", tr.batch, "Override the preset's bags per optimizer step");
    train_cmd->add_option("--lr", tr.lr, "Override the preset's peak learning rate");
    train_cmd->add_option("--seed", tr.seed, "Shuffling seed")->capture_default_str();
    train_cmd->add_option("--model-seed", tr.model_seed, "Parameter initialization seed")->capture_default_str();
    tr.model.add(*train_cmd);

    EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest split");
    eval_cmd->add_option("--checkpoint", ev.checkpoint, "SQCK checkpoint")->required();
    eval_cmd->add_option("--manifest", ev.manifest, "Dataset manifest CSV")->required();
    eval_cmd->add_option("--split", ev.split, "Split tag to evaluate, or 'all'")->capture_default_str();
    eval_cmd->add_option("--out", ev.out, "Metrics JSON path (stdout when omitted)");

    ExplainArgs ex;
    auto* explain_cmd = app.add_subcommand("explain", "Export rollout heatmaps and the query entropy profile");
    explain_cmd->add_option("--checkpoint", ex.checkpoint, "SQCK checkpoint")->required();
    explain_cmd->add_option("--bag", ex.bags, "SQBG bag file (repeatable)");
    explain_cmd->add_option("--manifest", ex.manifest, "Explain every bag of a manifest split instead");
    explain_cmd->add_option("--split", ex.split, "Split tag used with --manifest, or 'all'")->capture_default_str();
    explain_cmd->add_option("--query", ex.queries, "Also export the head-averaged attention of query q (repeatable)");
    explain_cmd->add_flag("--sort", ex.sort, "Sort the entropy profile in descending order");
    explain_cmd->add_option("--out", ex.out, "Output directory")->required();

    BenchArgs be;
    auto* bench_cmd = app.add_subcommand("bench", "Tabulate analytic FLOPs (and optionally latency) against bag size");
    bench_cmd->add_option("--scale", be.scale, "full (h=768, S=256, 12 frozen blocks) or custom (model flags)")
        ->capture_default_str();
    bench_cmd->add_option("--lengths", be.lengths, "Bag sizes M")->delimiter(',')->capture_default_str();
    bench_cmd->add_option("--dim", be.input_dim, "Instance feature dimension d")->capture_default_str();
    bench_cmd->add_option("--classes", be.classes, "Number of classes C")->capture_default_str();
    bench_cmd->add_flag("--time", be.time, "Also time forward passes (median of --repeats)");
    bench_cmd->add_option("--repeats", be.repeats, "Timed repeats per bag size (>= 3)")->capture_default_str();
    bench_cmd->add_option("--out", be.out, "CSV path (stdout when omitted); a .json sidecar echoes the config");
    be.model.add(*bench_cmd);

    std::map<const CLI::App*, std::string> config_files;
    for (auto* sub : {gen_cmd, train_cmd, eval_cmd, explain_cmd, bench_cmd}) {
        sub->add_option("--config", config_files[sub], "INI file of key = value defaults (flags override)");
    }

    try {
        app.parse(argc, argv);
        for (auto* sub : app.get_subcommands()) {
            const auto& path = config_files[sub];
            if (path.empty()) continue;
            const auto extra = config_args(*sub, path);
            std::vector<std::string> args(argv + 1, argv + argc);
            const auto at = std::find(args.begin(), args.end(), sub->get_name());
            args.insert(at + 1, extra.begin(), extra.end());
            std::reverse(args.begin(), args.end());
            app.clear();
            app.parse(args);
        }
    } catch (const seqshort::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    if (*gen_cmd) return guarded([&] { return run_gen(gen, *gen_cmd); });
    if (*train_cmd) return guarded([&] { return run_train(tr, *train_cmd); });
    if (*eval_cmd) return guarded([&] { return run_eval(ev, *eval_cmd); });
    if (*explain_cmd) return guarded([&] { return run_explain(ex, *explain_cmd); });
    return guarded([&] { return run_bench(be, *bench_cmd); });
}

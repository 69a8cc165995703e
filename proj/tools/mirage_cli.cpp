// mirage: dataset generation, training, evaluation and analysis commands.

#include "mirage/mirage.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace mirage;

namespace {

struct CommonOptions {
    std::string config;
    std::string preset_name;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string pooler;
    std::string modalities;
    std::string manifest;
    bool capture_attn = false;
    std::optional<int> batches;
};

struct CommandOptions {
    std::vector<std::string> checkpoints;
    std::string split = "val";
    std::vector<int> grid;
    std::optional<int> repeats;
    std::optional<double> tau;
};

RunConfig resolve(const CommonOptions& o)
{
    RunConfig c = preset(o.preset_name.empty() ? "desk" : o.preset_name);
    if (!o.config.empty()) {
        c = load_config_file(o.config, c);
        if (!o.preset_name.empty() && o.preset_name != c.preset) {
            throw ConfigError("--preset " + o.preset_name + " conflicts with the config file preset " + c.preset);
        }
    }
    if (o.seed) {
        c.train.seed = *o.seed;
    }
    if (!o.out.empty()) {
        c.out = o.out;
    }
    if (!o.pooler.empty()) {
        c.encoder.pooler.kind = parse_pooler_kind(o.pooler);
    }
    if (!o.modalities.empty()) {
        try {
            c.train.modalities = parse_modality_set(o.modalities);
        } catch (const ValidationError& e) {
            throw ConfigError(e.what());
        }
        if (c.train.modalities.empty()) {
            throw ConfigError("--modalities must name at least one modality");
        }
    }
    if (!o.manifest.empty()) {
        c.manifest = o.manifest;
    }
    if (o.capture_attn) {
        c.evaluation.capture_attn = true;
    }
    if (o.batches) {
        c.evaluation.batches = *o.batches;
    }
    finalize_config(c);
    return c;
}

void write_text(const fs::path& path, const std::string& text)
{
    detail::write_file(path, text);
    std::cout << "wrote " << path.string() << '\n';
}

fs::path prepare_out(const RunConfig& c)
{
    const fs::path out(c.out);
    fs::create_directories(out);
    detail::write_file(out / "resolved_config.json", to_json(c).dump(2) + "\n");
    return out;
}

std::vector<const StimulusWindow*> split_of(const Dataset& data, const std::string& split)
{
    if (split == "val") {
        return data.val();
    }
    if (split == "train") {
        return data.train();
    }
    throw ConfigError("unknown split '" + split + "' (expected train or val)");
}

EncoderModel single_checkpoint(const CommandOptions& o)
{
    if (o.checkpoints.size() != 1) {
        throw ConfigError("this command needs exactly one --checkpoint");
    }
    return load_checkpoint(o.checkpoints.front()).model;
}

void emit_scores(const ScoreTable& table, const fs::path& out, const std::string& stem, int networks)
{
    write_text(out / (stem + ".csv"), score_table_csv(table));
    const Vector nets = table.network_means(networks);
    std::string csv = "network,mean_pearson\n";
    for (Eigen::Index n = 0; n < nets.size(); ++n) {
        csv += std::to_string(n) + "," + format_double(nets(n)) + "\n";
    }
    write_text(out / (stem + "_networks.csv"), csv);
    write_png(heatmap(table.pearson, 6), out / (stem + ".png"));
    std::cout << stem << " mean pearson " << format_double(table.mean()) << '\n';
}

ScoreTable with_networks(ScoreTable t, int networks)
{
    t.networks = synthetic_networks(static_cast<int>(t.pearson.cols()), networks);
    return t;
}

TrainResult train_model(const RunConfig& c, const Dataset& data, const fs::path& log_path)
{
    std::ofstream log(log_path, std::ios::binary);
    if (!log) {
        throw IoError("cannot open " + log_path.string());
    }
    return train(EncoderModel(resolve_encoder(c, data), c.train.seed), data.train(), data.val(), c.train, &log);
}

int cmd_generate(const RunConfig& c)
{
    const fs::path out = prepare_out(c);
    const Dataset data = make_planted_dataset(c);
    const fs::path manifest = write_dataset(data, out / "data");
    std::cout << "manifest " << manifest.string() << '\n';
    return 0;
}

int cmd_train(const RunConfig& c)
{
    const fs::path out = prepare_out(c);
    const Dataset data = load_dataset(c);
    const TrainResult result = train_model(c, data, out / "train_log.tsv");
    save_checkpoint(result.model, out / "model.ckpt", to_json(c));
    std::cout << "wrote " << (out / "model.ckpt").string() << '\n';

    std::string curve = "epoch,val_pearson\n";
    std::vector<double> xs;
    for (std::size_t e = 0; e < result.val_history.size(); ++e) {
        curve += std::to_string(e) + "," + format_double(result.val_history[e]) + "\n";
        xs.push_back(static_cast<double>(e));
    }
    write_text(out / "val_curve.csv", curve);
    write_png(line_plot(xs, result.val_history), out / "val_curve.png");
    std::cout << "best epoch " << result.best_epoch << " val pearson " << format_double(result.best_val_pearson) << '\n';
    emit_scores(with_networks(evaluate_model(result.model, data.val(), c.train.modalities), c.evaluation.networks), out,
                "val_scores", c.evaluation.networks);
    return 0;
}

int cmd_evaluate(const RunConfig& c, const CommandOptions& o)
{
    const fs::path out = prepare_out(c);
    const EncoderModel model = single_checkpoint(o);
    const Dataset data = load_dataset(c);
    emit_scores(with_networks(evaluate_model(model, split_of(data, o.split), c.train.modalities), c.evaluation.networks), out,
                o.split + "_scores", c.evaluation.networks);
    return 0;
}

int cmd_ablate(const RunConfig& c, const CommandOptions& o)
{
    const fs::path out = prepare_out(c);
    const EncoderModel model = single_checkpoint(o);
    const Dataset data = load_dataset(c);
    const auto windows = split_of(data, o.split);
    const ModalitySet base = c.train.modalities;
    const ScoreTable full = with_networks(evaluate_model(model, windows, base), c.evaluation.networks);
    emit_scores(full, out, "full_scores", c.evaluation.networks);
    std::cout << "null token " << (model.config().learned_null ? "learned" : "zero") << '\n';

    Matrix drops = Matrix::Zero(kNumModalities, full.pearson.cols());
    std::string summary = "modality,ablated_mean,drop\n";
    std::vector<double> bars;
    for (Modality m : kAllModalities) {
        if (!base.contains(m)) {
            continue;
        }
        const ScoreTable ablated = ablate_modality(model, windows, m, base);
        drops.row(static_cast<Eigen::Index>(slot(m))) = score_drop(full, ablated).transpose();
        summary += std::string(to_string(m)) + "," + format_double(ablated.mean()) + "," + format_double(full.mean() - ablated.mean()) + "\n";
        bars.push_back(full.mean() - ablated.mean());
    }
    write_text(out / "ablation_summary.csv", summary);
    const Dominance dom = dominant_modality(drops);
    std::string per_parcel = "parcel,drop_vision,drop_audio,drop_text,dominant,strength\n";
    for (Eigen::Index p = 0; p < drops.cols(); ++p) {
        per_parcel += std::to_string(p);
        for (Eigen::Index m = 0; m < drops.rows(); ++m) {
            per_parcel += "," + format_double(drops(m, p));
        }
        per_parcel += "," + std::string(to_string(dom.dominant[static_cast<std::size_t>(p)])) + "," +
                      format_double(dom.strength(p)) + "\n";
    }
    write_text(out / "ablation_parcels.csv", per_parcel);
    write_png(bar_chart(bars), out / "ablation.png");
    return 0;
}

int cmd_baseline(const RunConfig& c)
{
    const fs::path out = prepare_out(c);
    const Dataset data = load_dataset(c);
    const BaselineResult result = run_ridge_baseline(data.train(), data.val(), data.n_subjects(), c.ridge, c.train.modalities);
    emit_scores(with_networks(result.scores, c.evaluation.networks), out, "baseline_scores", c.evaluation.networks);
    const std::vector<long> counts = lambda_histogram(result, c.ridge.lambdas);
    std::string csv = "lambda,count\n";
    std::vector<double> bars;
    for (std::size_t g = 0; g < counts.size(); ++g) {
        csv += format_double(c.ridge.lambdas(static_cast<Eigen::Index>(g))) + "," + std::to_string(counts[g]) + "\n";
        bars.push_back(static_cast<double>(counts[g]));
    }
    write_text(out / "lambda_histogram.csv", csv);
    write_png(bar_chart(bars), out / "lambda_histogram.png");
    return 0;
}

int cmd_ensemble(const RunConfig& c, const CommandOptions& o)
{
    const fs::path out = prepare_out(c);
    std::vector<std::string> paths = o.checkpoints.empty() ? c.ensemble.checkpoints : o.checkpoints;
    if (paths.empty()) {
        throw ConfigError("ensemble needs checkpoints (--checkpoint or ensemble.checkpoints)");
    }
    const Dataset data = load_dataset(c);
    const auto windows = data.val();
    const int n_subjects = data.n_subjects();

    std::vector<EncoderModel> models;
    std::vector<std::vector<Matrix>> preds;
    std::vector<Matrix> rho;
    std::vector<double> means;
    for (const std::string& p : paths) {
        models.push_back(load_checkpoint(p).model);
        preds.push_back(predict_windows(models.back(), windows, c.train.modalities));
        const ScoreTable t = score_predictions(windows, preds.back(), n_subjects);
        rho.push_back(t.pearson);
        means.push_back(t.mean());
    }
    const auto chosen = top_n(means, static_cast<std::size_t>(c.ensemble.members));
    std::vector<Matrix> chosen_rho;
    for (std::size_t k : chosen) {
        chosen_rho.push_back(rho[k]);
    }
    const std::vector<Matrix> weights = compute_weights(chosen_rho, c.ensemble.tau);

    std::vector<Matrix> combined(windows.size());
    for (std::size_t i = 0; i < windows.size(); ++i) {
        std::vector<Matrix> member_preds;
        for (std::size_t k : chosen) {
            member_preds.push_back(preds[k][i]);
        }
        combined[i] = ensemble_predict(member_preds, subject_weights(weights, windows[i]->subject));
    }

    std::string members = "member,checkpoint,val_mean,selected\n";
    for (std::size_t k = 0; k < paths.size(); ++k) {
        const bool selected = std::find(chosen.begin(), chosen.end(), k) != chosen.end();
        members += std::to_string(k) + "," + paths[k] + "," + format_double(means[k]) + "," + (selected ? "1" : "0") + "\n";
    }
    write_text(out / "members.csv", members);
    emit_scores(with_networks(score_predictions(windows, combined, n_subjects), c.evaluation.networks), out, "ensemble_scores",
                c.evaluation.networks);
    return 0;
}

int cmd_attribute(const RunConfig& c, const CommandOptions& o)
{
    const fs::path out = prepare_out(c);
    const EncoderModel model = single_checkpoint(o);
    if (model.config().pooler.kind != PoolerKind::xattn) {
        throw ConfigError("attribution needs a checkpoint with the xattn pooler");
    }
    const Dataset data = load_dataset(c);
    const auto windows = split_of(data, o.split);
    const std::size_t n = std::min(windows.size(), static_cast<std::size_t>(c.evaluation.batches));
    const ModalitySet active = c.train.modalities;

    std::array<AttributionAccumulator, kNumModalities> acc;
    for (std::size_t i = 0; i < n; ++i) {
        EncoderModel::Cache cache;
        std::array<AttentionWeights, kNumModalities> captured;
        model.forward(*windows[i], active, nn::ForwardOptions{}, cache, &captured);
        for (Modality m : kAllModalities) {
            if (active.contains(m)) {
                acc[slot(m)].accumulate(captured[slot(m)]);
            }
        }
    }
    std::cout << "attributed " << n << " windows\n";
    for (Modality m : kAllModalities) {
        if (!active.contains(m)) {
            continue;
        }
        const std::string name(to_string(m));
        for (ProfileKind kind : {ProfileKind::modality, ProfileKind::per_head, ProfileKind::per_query, ProfileKind::tr_resolved}) {
            const std::string stem = name + "_" + std::string(to_string(kind));
            const char* row = kind == ProfileKind::per_head ? "head_" : kind == ProfileKind::per_query ? "query_" : kind == ProfileKind::tr_resolved ? "frame_" : "";
            const Matrix prof = acc[slot(m)].profile(kind);
            write_text(out / (stem + ".csv"), matrix_csv(prof, kind == ProfileKind::modality ? "profile" : "row",
                                                         kind == ProfileKind::modality ? "mean" : row, "layer_"));
            write_png(heatmap(prof, kind == ProfileKind::tr_resolved ? 4 : 16), out / (stem + ".png"));
        }
    }
    return 0;
}

int cmd_sweep_nq(RunConfig c, const CommandOptions& o)
{
    if (!o.grid.empty()) {
        c.sweep.n_queries = o.grid;
    }
    if (o.repeats) {
        c.sweep.repeats = *o.repeats;
    }
    finalize_config(c);
    const fs::path out = prepare_out(c);
    const Dataset data = load_dataset(c);

    std::string csv = "n_queries,repeat,seed,val_pearson\n";
    std::vector<double> xs;
    std::vector<double> ys;
    for (int nq : c.sweep.n_queries) {
        double total = 0.0;
        for (int r = 0; r < c.sweep.repeats; ++r) {
            RunConfig job = c;
            job.encoder.pooler.kind = PoolerKind::xattn;
            job.encoder.pooler.n_queries = nq;
            job.train.seed = c.train.seed + static_cast<std::uint64_t>(r);
            const fs::path log = out / ("train_nq" + std::to_string(nq) + "_r" + std::to_string(r) + ".tsv");
            const TrainResult result = train_model(job, data, log);
            csv += std::to_string(nq) + "," + std::to_string(r) + "," + std::to_string(job.train.seed) + "," +
                   format_double(result.best_val_pearson) + "\n";
            total += result.best_val_pearson;
            std::cout << "n_q " << nq << " repeat " << r << " val " << format_double(result.best_val_pearson) << '\n';
        }
        xs.push_back(nq);
        ys.push_back(total / c.sweep.repeats);
    }
    write_text(out / "sweep_nq.csv", csv);
    write_png(line_plot(xs, ys), out / "sweep_nq.png");
    return 0;
}

int cmd_probe(const RunConfig& c, const CommandOptions& o)
{
    const fs::path out = prepare_out(c);
    const EncoderModel model = single_checkpoint(o);
    const Dataset data = load_dataset(c);
    std::string csv = "stage,mean_pearson\n";
    std::vector<double> bars;
    for (ProbeStage s : {ProbeStage::input, ProbeStage::post_pooler, ProbeStage::post_trunk, ProbeStage::output}) {
        const ScoreTable t = stage_probe(model, data.train(), data.val(), s, c.ridge, c.train.modalities);
        csv += std::string(to_string(s)) + "," + format_double(t.mean()) + "\n";
        bars.push_back(t.mean());
        std::cout << to_string(s) << " " << format_double(t.mean()) << '\n';
    }
    write_text(out / "probe.csv", csv);
    write_png(bar_chart(bars), out / "probe.png");
    return 0;
}

void add_common(CLI::App* cmd, CommonOptions& o)
{
    cmd->add_option("--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
    cmd->add_option("--preset", o.preset_name, "named preset")->check(CLI::IsMember({"desk", "paper"}));
    cmd->add_option("--seed", o.seed, "training seed");
    cmd->add_option("--out", o.out, "output directory");
    cmd->add_option("--pooler", o.pooler, "layer pooler")->check(CLI::IsMember({"xattn", "mean", "depth_groups"}));
    cmd->add_option("--modalities", o.modalities, "active modalities, e.g. vision,text");
    cmd->add_option("--manifest", o.manifest, "dataset manifest instead of planted data");
    cmd->add_flag("--capture-attn", o.capture_attn, "record layer attention weights");
    cmd->add_option("--batches", o.batches, "windows fed to attribution");
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"mirage: layer-gated multimodal brain encoding"};
    app.require_subcommand(1);
    CommonOptions common;
    CommandOptions cmd;

    struct Entry {
        const char* name;
        const char* help;
        CLI::App* app = nullptr;
    };
    std::vector<Entry> entries{{"generate", "write a planted dataset"},
                               {"train", "train an encoder"},
                               {"evaluate", "score a checkpoint"},
                               {"ablate", "per-modality ablation of a checkpoint"},
                               {"baseline", "ridge baseline on layer-mean features"},
                               {"ensemble", "validation-weighted ensemble of checkpoints"},
                               {"attribute", "layer attention profiles of a checkpoint"},
                               {"sweep-nq", "train across latent query counts"},
                               {"probe", "ridge probes on intermediate stages"}};
    for (Entry& e : entries) {
        e.app = app.add_subcommand(e.name, e.help);
        add_common(e.app, common);
    }
    auto sub = [&entries](const std::string& name) {
        return std::find_if(entries.begin(), entries.end(), [&name](const Entry& e) { return name == e.name; })->app;
    };
    for (const char* name : {"evaluate", "ablate", "attribute", "probe"}) {
        sub(name)->add_option("--checkpoint", cmd.checkpoints, "model checkpoint")->required()->expected(1);
    }
    sub("ensemble")->add_option("--checkpoint", cmd.checkpoints, "member checkpoints");
    for (const char* name : {"evaluate", "ablate", "attribute"}) {
        sub(name)->add_option("--split", cmd.split, "train or val")->check(CLI::IsMember({"train", "val"}));
    }
    sub("sweep-nq")->add_option("--grid", cmd.grid, "n_q values")->delimiter(',');
    sub("sweep-nq")->add_option("--repeats", cmd.repeats, "seeds per grid point");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        const RunConfig c = resolve(common);
        const std::string name = app.get_subcommands().front()->get_name();
        if (name == "generate") {
            return cmd_generate(c);
        }
        if (name == "train") {
            return cmd_train(c);
        }
        if (name == "evaluate") {
            return cmd_evaluate(c, cmd);
        }
        if (name == "ablate") {
            return cmd_ablate(c, cmd);
        }
        if (name == "baseline") {
            return cmd_baseline(c);
        }
        if (name == "ensemble") {
            return cmd_ensemble(c, cmd);
        }
        if (name == "attribute") {
            return cmd_attribute(c, cmd);
        }
        if (name == "sweep-nq") {
            return cmd_sweep_nq(c, cmd);
        }
        return cmd_probe(c, cmd);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}

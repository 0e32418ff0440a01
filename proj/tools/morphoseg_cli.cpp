// morphoseg command-line front end.
//
//   morphoseg synth   --out DIR --n N --seed S
//   morphoseg tile    --data DIR --out DIR
//   morphoseg train   --data DIR --out DIR --seed S [--config FILE] [--key=value ...]
//   morphoseg eval    --checkpoint FILE --data DIR
//   morphoseg infer   --checkpoint FILE --image FILE --mask-out FILE
//   morphoseg overlay --image FILE --mask FILE --out FILE
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 numerical error.

#include "morphoseg/errors.hpp"
#include "morphoseg/imaging.hpp"
#include "morphoseg/tiling.hpp"
#include "morphoseg/trainer.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace morphoseg;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumerical = 4;

struct SynthArgs {
    SynthConfig cfg;
    fs::path out;
    int n = 10;
    double train_fraction = 0.8;
};

struct TileArgs {
    fs::path data;
    fs::path out;
    std::vector<int> sizes{224, 448, 1000, 1500, 2000};
    double overlap = 0.35;
    double train_fraction = 0.8;
    std::uint64_t seed = 0;
    bool keep_maskless = false;
};

struct TrainArgs {
    TrainConfig cfg;
    fs::path data;
    std::string strategy = "balance";
    fs::path resume;
    fs::path config;
};

struct EvalArgs {
    fs::path checkpoint;
    fs::path data;
    std::string split = "test";
    fs::path csv;
    fs::path json;
    int patch = 224;
    int margin = 56;
};

struct InferArgs {
    fs::path checkpoint;
    fs::path image;
    fs::path mask_out;
    fs::path overlay_out;
    int patch = 224;
    int margin = 56;
};

struct OverlayArgs {
    fs::path image;
    fs::path mask;
    fs::path out;
};

void run_synth(const SynthArgs& a) {
    const auto samples = generate_synthetic_dataset(a.cfg, a.n);
    std::vector<std::size_t> idx(samples.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::vector<std::string> split(samples.size(), "train");
    if (samples.size() > 1) {
        const auto [train, test] = split_dataset(idx, a.train_fraction, a.cfg.seed);
        for (auto i : test) split[i] = "test";
    }
    fs::create_directories(a.out / "images");
    fs::create_directories(a.out / "masks");
    std::vector<ManifestRecord> records;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "synth_%05zu", i);
        ManifestRecord rec{name, std::nullopt, samples[i].image.height, samples[i].image.width, split[i],
                           std::string("images/") + name + ".png", std::string("masks/") + name + ".png"};
        save_image(samples[i].image, a.out / rec.image);
        save_mask(samples[i].mask, a.out / rec.mask);
        records.push_back(std::move(rec));
    }
    write_manifest(a.out / "manifest.jsonl", records);
    std::cout << "wrote " << samples.size() << " samples to " << a.out << "\n";
}

void run_tile(const TileArgs& a) {
    const auto records = read_manifest(a.data / "manifest.jsonl");
    std::vector<Patch> patches;
    for (const auto& rec : records) {
        const auto img = load_image(a.data / rec.image);
        const auto mask = load_mask(a.data / rec.mask, 2);
        auto p = extract_patches(img, mask, a.sizes, a.overlap, rec.source);
        patches.insert(patches.end(), std::make_move_iterator(p.begin()), std::make_move_iterator(p.end()));
    }
    const auto total = patches.size();
    if (!a.keep_maskless) patches = prune_maskless(std::move(patches));
    std::vector<std::size_t> idx(patches.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::vector<std::string> split(patches.size(), "train");
    const auto [train, test] = split_dataset(idx, a.train_fraction, a.seed);
    for (auto i : test) split[i] = "test";
    write_patch_dataset(a.out, patches, split);
    std::cout << total << " patches, " << patches.size() << " after pruning (" << train.size() << " train / "
              << test.size() << " test)\n";
}

void run_train(TrainArgs a) {
    a.cfg.loss.strategy = parse_strategy(a.strategy);
    auto train_set = load_dataset(a.data, "train", a.cfg.classes);
    if (train_set.size() == 0) train_set = load_dataset(a.data, "", a.cfg.classes);
    const auto val_set = load_dataset(a.data, "test", a.cfg.classes);
    std::optional<TrainState> resume;
    if (!a.resume.empty()) resume = from_checkpoint(load_checkpoint(a.resume));
    if (a.cfg.out_dir.empty()) throw ConfigError("train requires --out");
    const auto result = train(a.cfg, train_set, val_set.size() ? &val_set : nullptr, std::move(resume));
    for (const auto& w : result.log.warnings) std::cerr << "warning: " << w << "\n";
    if (!result.log.evals.empty()) {
        const auto& last = result.log.evals.back();
        std::cout << "epoch " << last.epoch << " validation: " << to_json(last.report).dump() << "\n";
    }
    std::cout << "final checkpoint: " << (a.cfg.out_dir / "last.ckpt").string() << "\n";
}

void run_eval(const EvalArgs& a) {
    const auto ckpt = load_checkpoint(a.checkpoint);
    const auto data = load_dataset(a.data, a.split, ckpt.params.classes());
    const auto report = evaluate(ckpt.params, data, a.patch, a.margin);
    if (!a.csv.empty()) write_eval_csv(report, a.csv);
    const auto summary = to_json(report).dump(2);
    if (!a.json.empty()) {
        std::ofstream out(a.json);
        if (!out) throw DataError("cannot write " + a.json.string());
        out << summary << "\n";
    }
    std::cout << summary << "\n";
}

void run_infer(const InferArgs& a) {
    const auto ckpt = load_checkpoint(a.checkpoint);
    const auto img = load_image(a.image);
    const auto result = infer(ckpt.params, img, a.patch, a.margin);
    save_mask(result.mask, a.mask_out);
    if (!a.overlay_out.empty()) save_overlay(img, result.mask, a.overlay_out);
}

void add_train_options(CLI::App& cmd, TrainArgs& a) {
    auto& c = a.cfg;
    // Expanded by expand_config() before parsing; registered so it is accepted.
    cmd.add_option("--config", a.config, "key = value config file mirroring the training options");
    cmd.add_option("--data", a.data, "Dataset directory with manifest.jsonl")->required();
    cmd.add_option("--out,--out_dir", c.out_dir, "Output directory for checkpoints and logs");
    cmd.add_option("--seed", c.seed, "Base seed")->required();
    cmd.add_option("--init_seed", c.init_seed, "Parameter init seed (0: derived from --seed)");
    cmd.add_option("--resume", a.resume, "Continue from a trainer checkpoint");
    cmd.add_option("--epochs", c.epochs);
    cmd.add_option("--sampling_start_epoch", c.sampling_start_epoch, "Negative: 0.75 * epochs");
    cmd.add_option("--batch_size", c.batch_size);
    cmd.add_option("--pixels_per_image", c.pixels_per_image);
    cmd.add_option("--sample_size", c.sample_size);
    cmd.add_option("--selection_count", c.selection_count);
    cmd.add_option("--substitution_fraction", c.substitution_fraction);
    cmd.add_option("--queue_capacity", c.queue_capacity);
    cmd.add_option("--outliers_enabled", c.outliers_enabled);
    cmd.add_option("--foreground_only", c.foreground_only);
    cmd.add_option("--classes", c.classes);
    cmd.add_option("--strategy", a.strategy)->check(CLI::IsMember({"balance", "norm", "pareto"}));
    cmd.add_option("--lambda", c.loss.weights.lambda);
    cmd.add_option("--beta", c.loss.weights.beta);
    cmd.add_option("--lambda1", c.loss.weights.lambda1);
    cmd.add_option("--lambda2", c.loss.weights.lambda2);
    cmd.add_option("--beta1", c.loss.weights.beta1);
    cmd.add_option("--beta2", c.loss.weights.beta2);
    cmd.add_option("--dice_eps", c.loss.dice_eps);
    cmd.add_option("--norm_eps", c.loss.norm_eps);
    cmd.add_option("--lr0", c.optim.lr0);
    cmd.add_option("--momentum", c.optim.momentum);
    cmd.add_option("--weight_decay", c.optim.weight_decay);
    cmd.add_option("--gamma", c.optim.gamma);
    cmd.add_option("--eval_every", c.eval_every);
    cmd.add_option("--infer_patch", c.infer_patch);
    cmd.add_option("--infer_margin", c.infer_margin);
}

// Splices `--key=value` for every entry of the train config file in front
// of the command-line flags; with TakeLast options the flags win.
std::vector<std::string> expand_config(int argc, char** argv) {
    std::vector<std::string> args(argv, argv + argc);
    if (args.size() < 2 || args[1] != "train") return args;
    std::string file;
    for (std::size_t i = 2; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) file = args[i + 1];
        if (args[i].rfind("--config=", 0) == 0) file = args[i].substr(9);
    }
    if (file.empty()) return args;
    if (!fs::exists(file)) throw ConfigError("config file not found: " + file);
    std::vector<std::string> injected;
    for (const auto& item : CLI::ConfigINI().from_file(file)) {
        if (item.name == "++" || item.name == "--" || item.inputs.empty()) continue;
        std::string value = item.inputs.front();
        for (std::size_t i = 1; i < item.inputs.size(); ++i) value += "," + item.inputs[i];
        injected.push_back("--" + item.name + "=" + value);
    }
    args.insert(args.begin() + 2, injected.begin(), injected.end());
    return args;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Uncertainty-aware cell segmentation with virtual outlier synthesis"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic cell dataset");
    synth_cmd->add_option("--out", synth.out)->required();
    synth_cmd->add_option("--n", synth.n, "Number of images");
    synth_cmd->add_option("--seed", synth.cfg.seed);
    synth_cmd->add_option("--image_size", synth.cfg.image_size);
    synth_cmd->add_option("--cells_min", synth.cfg.cell_count_range.first);
    synth_cmd->add_option("--cells_max", synth.cfg.cell_count_range.second);
    synth_cmd->add_option("--spurs_min", synth.cfg.protrusion_count_range.first);
    synth_cmd->add_option("--spurs_max", synth.cfg.protrusion_count_range.second);
    synth_cmd->add_option("--noise_sigma", synth.cfg.noise_sigma);
    synth_cmd->add_option("--blur_radius", synth.cfg.blur_radius);
    synth_cmd->add_option("--train_fraction", synth.train_fraction);

    TileArgs tile;
    auto* tile_cmd = app.add_subcommand("tile", "Build an overlapping patch dataset with manifest");
    tile_cmd->add_option("--data", tile.data)->required();
    tile_cmd->add_option("--out", tile.out)->required();
    tile_cmd->add_option("--sizes", tile.sizes)->delimiter(',');
    tile_cmd->add_option("--overlap", tile.overlap);
    tile_cmd->add_option("--train_fraction", tile.train_fraction);
    tile_cmd->add_option("--seed", tile.seed);
    tile_cmd->add_flag("--keep_maskless", tile.keep_maskless);

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "Train the reference segmenter");
    train_cmd->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    add_train_options(*train_cmd, train_args);

    EvalArgs eval;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint (DSC, HD95, IoU-t, mAP)");
    eval_cmd->add_option("--checkpoint", eval.checkpoint)->required();
    eval_cmd->add_option("--data", eval.data)->required();
    eval_cmd->add_option("--split", eval.split, "Manifest split to evaluate (empty: all)");
    eval_cmd->add_option("--csv", eval.csv);
    eval_cmd->add_option("--json", eval.json);
    eval_cmd->add_option("--patch", eval.patch);
    eval_cmd->add_option("--margin", eval.margin);

    InferArgs inf;
    auto* infer_cmd = app.add_subcommand("infer", "Tiled inference on one image");
    infer_cmd->add_option("--checkpoint", inf.checkpoint)->required();
    infer_cmd->add_option("--image", inf.image)->required();
    infer_cmd->add_option("--mask-out", inf.mask_out)->required();
    infer_cmd->add_option("--overlay-out", inf.overlay_out);
    infer_cmd->add_option("--patch", inf.patch);
    infer_cmd->add_option("--margin", inf.margin);

    OverlayArgs ov;
    auto* overlay_cmd = app.add_subcommand("overlay", "Blend a mask over an image in red");
    overlay_cmd->add_option("--image", ov.image)->required();
    overlay_cmd->add_option("--mask", ov.mask)->required();
    overlay_cmd->add_option("--out", ov.out)->required();

    try {
        const auto args = expand_config(argc, argv);
        std::vector<const char*> cargs;
        for (const auto& a : args) cargs.push_back(a.c_str());
        app.parse(static_cast<int>(cargs.size()), cargs.data());
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }

    try {
        if (*synth_cmd) run_synth(synth);
        if (*tile_cmd) run_tile(tile);
        if (*train_cmd) run_train(train_args);
        if (*eval_cmd) run_eval(eval);
        if (*infer_cmd) run_infer(inf);
        if (*overlay_cmd) save_overlay(load_image(ov.image), load_mask(ov.mask, 2), ov.out);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    }
    return 0;
}

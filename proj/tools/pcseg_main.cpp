// Command-line front end: segment a scan, train/evaluate at desk scale, and
// run the knn / flatten benchmark suites.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pcseg/pcseg.hpp"

namespace fs = std::filesystem;

namespace {

struct GlobalOpts {
    int threads = 0;          // 0 = hardware default
    bool float64 = false;     // numeric profile: float32 runtime unless asked
    std::string config_path;  // optional key=value file; flags override it
    std::uint64_t seed = 1;
};

pcseg::KvConfig resolved_config(const GlobalOpts& g, const pcseg::ModelConfig& mc) {
    pcseg::KvConfig kv;
    if (!g.config_path.empty()) kv = pcseg::KvConfig::parse_file(g.config_path);
    pcseg::model_config_to_kv(mc, kv);
    kv.set_int("run.threads", pcseg::max_threads());
    kv.set_int("run.seed", static_cast<std::int64_t>(g.seed));
    kv.set("run.profile", g.float64 ? "float64" : "float32");
    return kv;
}

void log_config(const pcseg::KvConfig& kv) {
    std::cout << "# resolved config\n";
    for (const auto& [k, v] : kv.entries()) std::cout << "# " << k << "=" << v << "\n";
}

void apply_thread_opts(GlobalOpts& g) {
    if (const char* env = std::getenv("PCSEG_THREADS"); env && g.threads == 0)
        g.threads = std::max(1, std::atoi(env));
    if (g.threads > 0) pcseg::set_max_threads(g.threads);
}

pcseg::LabelRemap load_remap_or_identity(const std::string& remap_path, const pcseg::ModelConfig& mc) {
    if (!remap_path.empty())
        return pcseg::LabelRemap::load(remap_path, mc.class_count, mc.ignore_class);
    return pcseg::LabelRemap::identity(mc.class_count, mc.ignore_class);
}

// Preprocess settings resolve from the optional config file first; explicit
// flags override.
pcseg::PreprocessConfig resolve_preprocess(const GlobalOpts& g, double voxel_flag) {
    pcseg::PreprocessConfig pre;
    if (!g.config_path.empty())
        pre = pcseg::preprocess_config_from_kv(pcseg::KvConfig::parse_file(g.config_path));
    if (voxel_flag > 0) pre.voxel_size = voxel_flag;
    pre.validate();
    return pre;
}

template <class S>
int run_segment(const std::string& input, const std::string& model_path, const std::string& out_path,
                const std::string& remap_path, double voxel_flag, const GlobalOpts& g) {
    auto ck = pcseg::load_checkpoint<S>(model_path);
    const pcseg::PreprocessConfig pre = resolve_preprocess(g, voxel_flag);
    auto kv = resolved_config(g, ck.config);
    pcseg::preprocess_config_to_kv(pre, kv);
    log_config(kv);
    const pcseg::LabelRemap remap = load_remap_or_identity(remap_path, ck.config);

    auto read = pcseg::read_point_file(input);
    PCSEG_CHECK(!read.cloud.points.empty(), input << " holds no usable points");

    pcseg::Stopwatch total;
    auto cropped = pcseg::fov_crop(read.cloud, pre.crop_min, pre.crop_max);
    PCSEG_CHECK(!cropped.cloud.points.empty(), "crop box left no points from " << input);
    auto vr = pcseg::voxel_downsample(cropped.cloud, pre.voxel_size);
    auto ctx = pcseg::prepare_context(vr.cloud, ck.config);
    pcseg::ForwardTimings t;
    auto logits = pcseg::forward<S>(nullptr, vr.cloud, ctx, ck.params, ck.config, pcseg::Mode::eval,
                                    nullptr, &t);
    auto reduced = pcseg::predict_labels(logits->value, ck.config.ignore_class);
    const double total_ms = total.elapsed_ms();

    // Broadcast to the original file rows; rows dropped at read time or by the
    // crop keep the ignore class so the output stays aligned with the input.
    std::vector<std::int32_t> full(read.raw_count, ck.config.ignore_class);
    for (std::size_t i = 0; i < cropped.cloud.size(); ++i)
        full[read.kept_rows[cropped.kept[i]]] = reduced[static_cast<std::size_t>(vr.backmap[i])];
    pcseg::write_label_file(out_path, full, remap);

    std::map<std::int32_t, std::size_t> counts;
    for (auto l : full) ++counts[l];
    std::cout << "points: " << read.raw_count << " (" << vr.cloud.size() << " after crop + voxel "
              << pre.voxel_size << " m)\n";
    std::cout << "class,count\n";
    for (const auto& [cls, cnt] : counts) std::cout << cls << "," << cnt << "\n";
    std::cout << "stage,millis\nembed," << t.embed_ms << "\nbackbone," << t.backbone_ms << "\nhead,"
              << t.head_ms << "\ntotal," << total_ms << "\n";
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

template <class S>
int run_train_toy(std::uint64_t seed, int steps, const std::string& out_path, int feature_width,
                  int layers, bool drop_range, double lr, const std::string& export_prefix,
                  const GlobalOpts& g) {
    pcseg::ModelConfig cfg = pcseg::make_toy_model_config(feature_width, layers);
    if (drop_range)
        cfg.cycle = {pcseg::ProjectionView::xy, pcseg::ProjectionView::xz, pcseg::ProjectionView::yz};
    log_config(resolved_config(g, cfg));

    auto scenes = pcseg::make_toy_dataset(seed, 1, 500, 500);
    pcseg::PointCloud& scene = scenes[0];
    auto ctx = pcseg::prepare_context(scene, cfg);
    auto params = pcseg::init_params<S>(cfg, seed);
    auto opt_state = pcseg::OptimState<S>::init(params);
    pcseg::OptimConfig oc;
    oc.lr = lr;
    oc.cosine_steps = steps;

    double first_loss = 0, last_loss = 0;
    for (int s = 0; s < steps; ++s) {
        const double loss = pcseg::train_step(params, opt_state, scene, ctx, cfg, oc, seed);
        if (s == 0) first_loss = loss;
        last_loss = loss;
        if (s % 50 == 0 || s == steps - 1) std::cout << "step," << s << ",loss," << loss << "\n";
    }
    const double acc = pcseg::point_accuracy(params, cfg, scene);
    std::cout << "first_loss," << first_loss << "\nfinal_loss," << last_loss << "\naccuracy," << acc
              << "\n";
    pcseg::save_checkpoint(out_path, params, cfg);
    std::cout << "wrote " << out_path << "\n";

    if (!export_prefix.empty()) {
        pcseg::write_point_file(export_prefix + ".bin", scene);
        const auto remap = pcseg::LabelRemap::identity(cfg.class_count, cfg.ignore_class);
        pcseg::write_label_file(export_prefix + ".label", scene.labels, remap);
        std::cout << "wrote " << export_prefix << ".bin/.label\n";
    }
    return 0;
}

std::vector<std::pair<std::string, std::string>> find_scan_pairs(const std::string& data_dir) {
    std::vector<std::pair<std::string, std::string>> pairs;
    const fs::path root(data_dir);
    PCSEG_CHECK_IO(fs::exists(root), "data directory " << data_dir << " does not exist");
    const fs::path velo = fs::exists(root / "velodyne") ? root / "velodyne" : root;
    const fs::path labels = fs::exists(root / "labels") ? root / "labels" : root;
    std::vector<fs::path> bins;
    for (const auto& e : fs::directory_iterator(velo))
        if (e.path().extension() == ".bin") bins.push_back(e.path());
    std::sort(bins.begin(), bins.end());
    for (const auto& b : bins) {
        fs::path lab = labels / b.filename();
        lab.replace_extension(".label");
        if (fs::exists(lab)) pairs.emplace_back(b.string(), lab.string());
    }
    PCSEG_CHECK_IO(!pairs.empty(), "no .bin/.label pairs under " << data_dir);
    return pairs;
}

template <class S>
int run_eval(const std::string& model_path, const std::string& data_dir, const std::string& split,
             const std::string& remap_path, double voxel_flag, const GlobalOpts& g) {
    auto ck = pcseg::load_checkpoint<S>(model_path);
    const pcseg::PreprocessConfig pre = resolve_preprocess(g, voxel_flag);
    log_config(resolved_config(g, ck.config));
    const pcseg::LabelRemap remap = load_remap_or_identity(remap_path, ck.config);

    const std::string scan_dir = split.empty() ? data_dir : (fs::path(data_dir) / split).string();
    std::vector<pcseg::PointCloud> clouds;
    for (const auto& [bin, label] : find_scan_pairs(scan_dir)) {
        auto read = pcseg::read_point_file(bin);
        auto raw = pcseg::read_label_raw(label);
        PCSEG_CHECK_IO(raw.size() == read.raw_count, label << ": expected " << read.raw_count
                                                           << " labels, found " << raw.size());
        read.cloud.labels.resize(read.cloud.size());
        for (std::size_t i = 0; i < read.cloud.size(); ++i)
            read.cloud.labels[i] =
                remap.to_train(static_cast<std::uint16_t>(raw[read.kept_rows[i]] & 0xFFFFu));
        clouds.push_back(std::move(read.cloud));
    }
    std::cout << "evaluating " << clouds.size() << " scans\n";
    auto res = pcseg::evaluate(ck.params, ck.config, clouds, voxel_size);
    std::cout << pcseg::metrics_csv(res.cm);
    return 0;
}

int run_bench_knn(std::int64_t n, int k, int threads, int reps, std::uint64_t seed) {
    pcseg::Rng rng(seed);
    pcseg::PointCloud cloud;
    cloud.points.resize(static_cast<std::size_t>(n));
    for (auto& p : cloud.points) {
        p.x = static_cast<float>(rng.uniform(-50, 50));
        p.y = static_cast<float>(rng.uniform(-50, 50));
        p.z = static_cast<float>(rng.uniform(-5, 5));
        p.intensity = static_cast<float>(rng.uniform01());
        p.range = pcseg::point_norm(p.x, p.y, p.z);
    }
    auto rep = pcseg::bench_build_query(cloud, k, threads, reps);
    std::cout << "knn bench: n=" << rep.n << " k=" << rep.k << " threads=" << rep.threads
              << " identical_results=" << (rep.identical ? "yes" : "no") << "\n";
    std::cout << rep.csv();
    PCSEG_CHECK(rep.identical, "thread counts disagreed on knn results");
    return 0;
}

int run_bench_flatten(std::int64_t n, std::int64_t hw, std::int64_t c, int reps, std::uint64_t seed) {
    auto rep = pcseg::bench_flatten<float>(n, hw, c, reps, seed);
    std::cout << "flatten bench: n=" << n << " hw=" << hw << " c=" << c
              << " max_abs_diff=" << rep.max_abs_diff << "\n";
    std::cout << rep.csv();
    if (reps > 0)
        std::cout << "median scatter=" << rep.scatter_median() << " ms, matmul=" << rep.matmul_median()
                  << " ms\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"point cloud semantic segmentation engine"};
    app.require_subcommand(1);

    GlobalOpts g;
    app.add_option("--threads", g.threads, "worker thread cap (env PCSEG_THREADS)");
    app.add_flag("--float64", g.float64, "run in the float64 profile");
    app.add_option("--config", g.config_path, "key=value config file (flags win)");
    app.add_option("--seed", g.seed, "seed for anything randomized");

    auto* seg = app.add_subcommand("segment", "label one point file with a checkpoint");
    std::string in_path, model_path, out_path, remap_path, data_dir, export_prefix;
    double voxel_size = 0.1;
    seg->add_option("--input", in_path, "point file (.bin)")->required();
    seg->add_option("--model", model_path, "checkpoint path")->required();
    seg->add_option("--out", out_path, "output label file")->required();
    seg->add_option("--remap", remap_path, "raw<->train id table");
    seg->add_option("--voxel-size", voxel_size, "preprocess voxel size in meters");

    auto* tt = app.add_subcommand("train-toy", "overfit a synthetic scene and write a checkpoint");
    int steps = 500, feature_width = 32, layers = 4;
    bool drop_range = false;
    double lr = 2e-3;
    tt->add_option("--steps", steps, "training steps");
    tt->add_option("--out", out_path, "checkpoint path")->required();
    tt->add_option("--f", feature_width, "feature width");
    tt->add_option("--layers", layers, "backbone layers");
    tt->add_flag("--no-range", drop_range, "drop the range image from the projection cycle");
    tt->add_option("--lr", lr, "learning rate");
    tt->add_option("--export-scene", export_prefix, "also write <prefix>.bin/.label of the scene");

    auto* ev = app.add_subcommand("eval", "score labeled scans in a directory");
    ev->add_option("--model", model_path, "checkpoint path")->required();
    ev->add_option("--data-dir", data_dir, "dir with .bin/.label files (env PCSEG_DATA_DIR)");
    ev->add_option("--remap", remap_path, "raw<->train id table");
    ev->add_option("--voxel-size", voxel_size, "preprocess voxel size in meters");

    auto* be = app.add_subcommand("bench", "performance suites");
    std::string suite;
    std::int64_t bn = 100000, bhw = 4096, bc = 64;
    int bk = 16, breps = 5, bthreads = 0;
    be->add_option("--suite", suite, "knn | flatten")->required();
    be->add_option("--n", bn, "point count");
    be->add_option("--k", bk, "neighbors (knn suite)");
    be->add_option("--hw", bhw, "grid cells (flatten suite)");
    be->add_option("--c", bc, "channels (flatten suite)");
    be->add_option("--reps", breps, "timed repetitions");
    be->add_option("--threads", bthreads, "threaded arm worker count (default: all cores)");

    CLI11_PARSE(app, argc, argv);

    try {
        apply_thread_opts(g);
        if (seg->parsed())
            return g.float64 ? run_segment<double>(in_path, model_path, out_path, remap_path, voxel_size, g)
                             : run_segment<float>(in_path, model_path, out_path, remap_path, voxel_size, g);
        if (tt->parsed())
            return g.float64 ? run_train_toy<double>(g.seed, steps, out_path, feature_width, layers,
                                                     drop_range, lr, export_prefix, g)
                             : run_train_toy<float>(g.seed, steps, out_path, feature_width, layers,
                                                    drop_range, lr, export_prefix, g);
        if (ev->parsed()) {
            if (data_dir.empty())
                if (const char* env = std::getenv("PCSEG_DATA_DIR")) data_dir = env;
            PCSEG_CHECK(!data_dir.empty(), "eval needs --data-dir or PCSEG_DATA_DIR");
            return g.float64 ? run_eval<double>(model_path, data_dir, remap_path, voxel_size, g)
                             : run_eval<float>(model_path, data_dir, remap_path, voxel_size, g);
        }
        if (be->parsed()) {
            const int threads = bthreads > 0 ? bthreads : pcseg::max_threads();
            if (suite == "knn") return run_bench_knn(bn, bk, threads, breps, g.seed);
            if (suite == "flatten") return run_bench_flatten(bn, bhw, bc, breps, g.seed);
            PCSEG_CHECK(false, "unknown bench suite '" << suite << "' (expected knn or flatten)");
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

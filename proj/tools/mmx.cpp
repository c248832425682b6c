// mmx: data generation, precaching, training, evaluation and gradient checks.

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mmx/mmx.hpp"

namespace fs = std::filesystem;
using namespace mmx;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerify = 1;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

struct Common {
    std::string config_path;
    unsigned threads = default_threads();
};

TrainConfig resolve(const Common& common) {
    TrainConfig c = common.config_path.empty() ? TrainConfig{} : load_config(common.config_path);
    validate(c);
    std::cout << "# resolved config\n" << to_text(c) << "# seed " << c.seed << "\n";
    return c;
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) {
        throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
    }
}

std::vector<PointCloud> load_all(const std::vector<std::string>& paths) {
    std::vector<PointCloud> out;
    for (const auto& p : paths) {
        auto part = load_dataset(p);
        out.insert(out.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
    }
    return out;
}

struct Caches {
    EmbeddingCache text;
    EmbeddingCache image;
};

Caches load_caches(const std::vector<std::string>& paths) {
    std::optional<EmbeddingCache> text;
    std::optional<EmbeddingCache> image;
    for (const auto& p : paths) {
        EmbeddingCache c = load_cache(p);
        auto& slot = c.modality == Modality::text ? text : image;
        if (slot) throw ConfigError("two " + std::string(modality_name(c.modality)) + " caches given");
        slot = std::move(c);
    }
    if (!text || !image) throw ConfigError("--caches needs one text and one image cache");
    return {std::move(*text), std::move(*image)};
}

std::vector<std::uint32_t> labels_of(const std::vector<PointCloud>& data) {
    std::vector<std::uint32_t> out;
    for (const auto& pc : data) out.push_back(pc.class_id);
    return out;
}

std::vector<std::uint64_t> ids_of(const std::vector<PointCloud>& data) {
    std::vector<std::uint64_t> out;
    for (const auto& pc : data) out.push_back(pc.id);
    return out;
}

MatD cache_matrix(const EmbeddingCache& cache, const std::vector<PointCloud>& data) {
    MatD out(static_cast<Eigen::Index>(data.size()), static_cast<Eigen::Index>(cache.dim));
    for (std::size_t k = 0; k < data.size(); ++k) {
        out.row(static_cast<Eigen::Index>(k)) = cache.at(data[k].id).transpose();
    }
    return out;
}

/// One text embedding per class, read from the text cache through any sample of that class.
MatD class_embeddings(const EmbeddingCache& text, const std::vector<PointCloud>& data, std::uint32_t classes) {
    MatD out(classes, static_cast<Eigen::Index>(text.dim));
    std::vector<bool> seen(classes, false);
    for (const auto& pc : data) {
        if (pc.class_id >= classes) throw DomainError("sample class exceeds data.num_classes");
        if (!seen[pc.class_id]) {
            out.row(pc.class_id) = text.at(pc.id).transpose();
            seen[pc.class_id] = true;
        }
    }
    for (std::uint32_t k = 0; k < classes; ++k) {
        if (!seen[k]) throw DomainError("no sample of class " + std::to_string(k) + " to read its text embedding");
    }
    return out;
}

void write_log(const fs::path& out, const std::string& prefix, const StepLog& log) {
    write_file(out / (prefix + "_steps.csv"), steps_csv(log));
    write_file(out / (prefix + "_pairs.csv"), pairs_csv(log));
}

void print_report(const EvalReport& rep) {
    std::cout << rep.protocol;
    for (std::size_t n = 0; n < rep.ks.size(); ++n) {
        std::cout << ' ' << metric_name(rep, rep.ks[n]) << '=' << format_double(rep.accuracy[n]);
    }
    std::cout << '\n';
}

int run_gen_data(const Common& common, const std::string& out) {
    const TrainConfig c = resolve(common);
    ensure_dir(out);
    const auto train = generate_dataset({c.seed, c.num_classes, c.train_size, c.points_per_cloud, c.jitter, 0});
    const auto eval = generate_dataset({c.seed, c.num_classes, c.eval_size, c.points_per_cloud, c.jitter, c.train_size});
    save_dataset(train, fs::path(out) / "train.mmpd");
    save_dataset(eval, fs::path(out) / "eval.mmpd");
    for (const auto& [name, data] : {std::pair{"train", &train}, std::pair{"eval", &eval}}) {
        std::map<std::uint32_t, std::size_t> counts;
        for (const auto& pc : *data) counts[pc.class_id] += 1;
        std::cout << name << ' ' << data->size() << " samples;";
        for (const auto& [cls, n] : counts) std::cout << " class " << cls << ": " << n;
        std::cout << '\n';
    }
    return kExitOk;
}

int run_precache(const Common& common, const std::vector<std::string>& data_paths,
                 const std::string& modality, const std::string& out) {
    const TrainConfig c = resolve(common);
    const auto data = load_all(data_paths);
    const auto model = build_model(c.seed, c.num_classes, c.dim, c.sigma_image);
    const auto cache = precache(sample_refs(data), model, parse_modality(modality));
    save_cache(cache, out);
    std::cout << modality << " cache: " << cache.entries.size() << " entries, dim " << cache.dim << '\n';
    return kExitOk;
}

int run_train(const Common& common, const std::string& data_path, const std::vector<std::string>& cache_paths,
              std::string stage, const std::string& out, const std::string& init) {
    const TrainConfig c = resolve(common);
    if (stage.empty()) stage = c.stage_mode == StageMode::one ? "one-stage" : "both";
    ensure_dir(out);
    const auto data = load_dataset(data_path);
    const auto caches = load_caches(cache_paths);
    TrainOptions opt{common.threads, &std::cout};
    const fs::path dir(out);

    if (stage == "one-stage") {
        const auto r = train_one_stage(c, data, caches.text, caches.image, opt);
        save_checkpoint(r.first.params, r.first.temperature.rho, r.first.steps, dir / "stage1.mmck");
        save_checkpoint(r.second.params, r.second.temperature.rho, r.second.steps, dir / "stage2.mmck");
        StepLog log = r.first.log;
        log.rows.insert(log.rows.end(), r.second.log.rows.begin(), r.second.log.rows.end());
        log.pairs = r.second.log.pairs;
        write_log(dir, "onestage", log);
        std::cout << "wrote stage1.mmck, stage2.mmck\n";
        return kExitOk;
    }

    EncoderParams theta1;
    if (stage == "1" || stage == "both") {
        const auto r = train_stage1(c, data, caches.text, caches.image, opt);
        save_checkpoint(r.params, r.temperature.rho, r.steps, dir / "stage1.mmck");
        write_log(dir, "stage1", r.log);
        std::cout << "wrote stage1.mmck\n";
        theta1 = r.params;
    }
    if (stage == "2" || stage == "both") {
        if (stage == "2") {
            const fs::path from = init.empty() ? dir / "stage1.mmck" : fs::path(init);
            if (!fs::exists(from)) {
                throw ConfigError("--stage 2 needs a stage-one checkpoint; " + from.string() + " not found");
            }
            theta1 = load_checkpoint(from, c.hidden, c.dim).params;
        }
        const auto r = train_stage2(c, data, caches.text, caches.image, theta1, opt);
        save_checkpoint(r.params, r.temperature.rho, r.steps, dir / "stage2.mmck");
        write_log(dir, "stage2", r.log);
        std::cout << "wrote stage2.mmck\n";
    }
    return kExitOk;
}

struct EvalArgs {
    std::string protocol;
    std::string checkpoint;
    std::string data;
    std::string train_data;
    std::vector<std::string> caches;
    std::string out;
    int layers = 1;
    std::size_t k = 1;
    std::string query = "point";
    std::size_t probe_epochs = 100;
    double probe_lr = 1e-2;
};

int run_eval(const Common& common, const EvalArgs& a) {
    const TrainConfig c = resolve(common);
    const auto ck = load_checkpoint(a.checkpoint, c.hidden, c.dim);
    const auto data = load_dataset(a.data);
    const auto caches = load_caches(a.caches);
    const MatD feats = encode_dataset(data, ck.params, common.threads);
    const auto labels = labels_of(data);
    const auto ids = ids_of(data);
    std::vector<std::size_t> ks;
    for (std::size_t k : {1, 3, 5}) {
        if (k <= c.num_classes) ks.push_back(k);
    }

    EvalReport rep;
    if (a.protocol == "zeroshot") {
        rep = zero_shot(feats, labels, class_embeddings(caches.text, data, c.num_classes), ks, ids);
    } else if (a.protocol == "linear") {
        if (a.train_data.empty()) throw ConfigError("--protocol linear needs --train-data");
        const auto train = load_dataset(a.train_data);
        ProbeConfig pc;
        pc.layers = a.layers;
        pc.epochs = a.probe_epochs;
        pc.lr = a.probe_lr;
        pc.seed = derive_seed(c.seed, Stream::probe);
        pc.ks = ks;
        rep = linear_probe(encode_dataset(train, ck.params, common.threads), labels_of(train), feats, labels,
                           c.num_classes, pc, ids);
    } else {
        const bool self = a.query == "point";
        const MatD query = self ? feats
                                : cache_matrix(a.query == "text" ? caches.text : caches.image, data);
        rep = retrieval(query, ids, labels, feats, ids, labels, a.k, self);
        rep.protocol = "retrieval-" + a.query;
    }
    print_report(rep);
    if (!a.out.empty()) {
        ensure_dir(a.out);
        write_file(fs::path(a.out) / (rep.protocol + ".json"), report_json(rep).dump(2) + "\n");
        write_file(fs::path(a.out) / (rep.protocol + ".csv"), report_csv(rep));
    }
    return kExitOk;
}

int run_gradcheck_cmd(const Common& common, const std::string& fault) {
    const TrainConfig c = resolve(common);
    GradcheckOptions opt;
    opt.fault_tensor = fault;
    const auto rep = run_gradcheck(c, opt);
    for (const auto& s : rep.suites) {
        std::cout << (s.passed ? "PASS " : "FAIL ") << s.name << ": " << s.checked << " entries, max rel error "
                  << format_double(s.max_rel) << " (tol " << s.tolerance << ") at " << s.worst_tensor << '['
                  << s.worst_index << "] analytic " << format_double(s.worst_analytic) << " numeric "
                  << format_double(s.worst_numeric) << '\n';
    }
    const auto& w = rep.worst();
    std::cout << "max rel error " << format_double(w.max_rel) << " in " << w.name << ' ' << w.worst_tensor << '['
              << w.worst_index << "]; " << rep.seconds << " s\n";
    std::cout << (rep.passed() ? "gradcheck passed\n" : "gradcheck FAILED\n");
    return rep.passed() ? kExitOk : kExitVerify;
}

int run_export(const Common& common, const std::string& checkpoint, const std::string& data_path,
               const std::string& out) {
    const TrainConfig c = resolve(common);
    const auto ck = load_checkpoint(checkpoint, c.hidden, c.dim);
    const auto data = load_dataset(data_path);
    export_features(data, ck.params, out, common.threads);
    std::cout << "wrote " << data.size() << " rows to " << out << '\n';
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"mmx: multi-modal mixing alignment for point cloud encoders"};
    app.require_subcommand(1);
    Common common;
    app.add_option("--config", common.config_path, "config file (key = value lines)")->check(CLI::ExistingFile);
    app.add_option("--threads", common.threads, "worker threads (default: MMX_THREADS or 1)")
        ->check(CLI::PositiveNumber);

    std::string out;
    std::vector<std::string> data_paths;
    std::vector<std::string> cache_paths;
    std::string modality;
    std::string stage;
    std::string init;
    std::string fault;
    std::string checkpoint;
    EvalArgs ev;

    auto* gen = app.add_subcommand("gen-data", "generate train.mmpd and eval.mmpd");
    gen->add_option("--out", out, "output directory")->required();

    auto* pre = app.add_subcommand("precache", "embed samples with the frozen text or image model");
    pre->add_option("--data", data_paths, "MMPD file(s)")->required()->check(CLI::ExistingFile);
    pre->add_option("--modality", modality, "text or image")->required()->check(CLI::IsMember({"text", "image"}));
    pre->add_option("--out", out, "output MMEC file")->required();

    auto* train = app.add_subcommand("train", "train stage 1, stage 2, both, or one-stage");
    train->add_option("--data", data_paths, "training MMPD file")->required()->check(CLI::ExistingFile);
    train->add_option("--caches", cache_paths, "text and image MMEC files")->required()->check(CLI::ExistingFile);
    train->add_option("--stage", stage, "1, 2, both or one-stage (default from train.stage_mode)")
        ->check(CLI::IsMember({"1", "2", "both", "one-stage"}));
    train->add_option("--init", init, "stage-one checkpoint for --stage 2 (default OUT/stage1.mmck)");
    train->add_option("--out", out, "output directory")->required();

    auto* eval = app.add_subcommand("eval", "zero-shot, linear probe or retrieval evaluation");
    eval->add_option("--protocol", ev.protocol, "zeroshot, linear or retrieval")
        ->required()
        ->check(CLI::IsMember({"zeroshot", "linear", "retrieval"}));
    eval->add_option("--checkpoint", ev.checkpoint, "MMCK checkpoint")->required()->check(CLI::ExistingFile);
    eval->add_option("--data", ev.data, "evaluation MMPD file")->required()->check(CLI::ExistingFile);
    eval->add_option("--train-data", ev.train_data, "probe training MMPD file (linear)")->check(CLI::ExistingFile);
    eval->add_option("--caches", ev.caches, "text and image MMEC files")->required()->check(CLI::ExistingFile);
    eval->add_option("--layers", ev.layers, "probe FC layers (linear)")->check(CLI::Range(1, 3));
    eval->add_option("--probe-epochs", ev.probe_epochs, "probe training epochs (linear)");
    eval->add_option("--probe-lr", ev.probe_lr, "probe learning rate (linear)")->check(CLI::PositiveNumber);
    eval->add_option("--k", ev.k, "retrieval depth")->check(CLI::PositiveNumber);
    eval->add_option("--query", ev.query, "retrieval query modality: point, text or image")
        ->check(CLI::IsMember({"point", "text", "image"}));
    eval->add_option("--out", ev.out, "directory for the JSON and CSV reports");

    auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every analytic gradient");
    grad->add_option("--fault", fault, "flip the sign of one tensor's gradient (harness self-test)");

    auto* exp = app.add_subcommand("export-features", "write encoder features as CSV");
    exp->add_option("--checkpoint", checkpoint, "MMCK checkpoint")->required()->check(CLI::ExistingFile);
    exp->add_option("--data", data_paths, "MMPD file")->required()->check(CLI::ExistingFile);
    exp->add_option("--out", out, "output CSV file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (*gen) return run_gen_data(common, out);
        if (*pre) return run_precache(common, data_paths, modality, out);
        if (*train) {
            if (data_paths.size() != 1) throw ConfigError("train takes exactly one --data file");
            return run_train(common, data_paths.front(), cache_paths, stage, out, init);
        }
        if (*eval) return run_eval(common, ev);
        if (*grad) return run_gradcheck_cmd(common, fault);
        if (*exp) {
            if (data_paths.size() != 1) throw ConfigError("export-features takes exactly one --data file");
            return run_export(common, checkpoint, data_paths.front(), out);
        }
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const DegenerateError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    }
    return kExitUsage;
}

// tvlm: command-line front end for building tables, running inference,
// training the toy student, planning memory and compression experiments.

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>

#include "tinyvlm/bytes.hpp"
#include "tinyvlm/compress.hpp"
#include "tinyvlm/embedstore.hpp"
#include "tinyvlm/encoder.hpp"
#include "tinyvlm/error.hpp"
#include "tinyvlm/planner.hpp"
#include "tinyvlm/synthetic.hpp"
#include "tinyvlm/train.hpp"
#include "tinyvlm/zeroshot.hpp"

using namespace tinyvlm;
using json = nlohmann::ordered_json;

namespace {

constexpr int kSchemaVersion = 1;

json envelope(const std::string& command) {
    json j;
    j["schema_version"] = kSchemaVersion;
    j["command"] = command;
    return j;
}

// Six decimals keeps golden files stable across harmless rounding changes.
double r6(double x) { return std::round(x * 1e6) / 1e6; }

void emit(const json& j) { std::cout << j.dump(2) << "\n"; }

InferencePath parse_path(const std::string& s) {
    if (s == "i8") return InferencePath::I8;
    if (s == "f32") return InferencePath::F32;
    throw Error(ErrorCode::InvalidArgument, "path must be i8 or f32, got '" + s + "'");
}

PlatformSpec load_platform(const std::string& arg) {
    if (std::filesystem::exists(arg)) return PlatformSpec::from_file(arg);
    return PlatformSpec::preset(arg);
}

Matrix table_matrix(const EmbeddingTable& t) {
    Matrix e(t.size(), t.dim());
    for (std::size_t k = 0; k < t.size(); ++k) {
        const auto row = t.dequantized_row(k);
        std::copy(row.begin(), row.end(), e.row(k).begin());
    }
    return e;
}

void write_csv(const std::string& path, const std::vector<PromptedClass>& classes) {
    std::ofstream f(path);
    if (!f) throw Error(ErrorCode::IoError, "cannot write " + path);
    const std::size_t d = classes.front().template_embeddings.front().size();
    f << "class,template";
    for (std::size_t i = 0; i < d; ++i) f << ",e" << i;
    f << "\n" << std::setprecision(17);
    for (const auto& c : classes)
        for (std::size_t t = 0; t < c.template_embeddings.size(); ++t) {
            f << c.class_name << ",t" << t;
            for (const auto v : c.template_embeddings[t]) f << "," << v;
            f << "\n";
        }
}

json layout_json(const LayoutReport& r) {
    json j;
    j["platform"] = r.platform;
    j["feasible"] = r.feasible;
    j["violating_item"] = r.violating_item;
    j["peak_activation_bytes"] = r.peak_activation_bytes;
    j["placements"] = json::array();
    for (const auto& p : r.placements)
        j["placements"].push_back({{"item", p.item}, {"region", to_string(p.region)}, {"bytes", p.bytes}});
    j["regions"] = json::array();
    for (const auto& u : r.regions)
        j["regions"].push_back(
            {{"region", to_string(u.region)}, {"capacity", u.capacity}, {"used", u.used}, {"slack", u.slack()}});
    return j;
}

struct Args {
    // embed-build
    std::string csv, out, precision = "i8";
    std::size_t dim = 0;
    // select-dim
    std::size_t classes = 0, budget = 0, bytes_per_value = 1;
    std::vector<std::size_t> ladder{16, 32, 64, 128, 256};
    // infer
    std::string image, model, table, path = "i8";
    // train / gradcheck / generators
    std::uint64_t seed = 42;
    std::size_t epochs = 50, batch = 16, samples = 64;
    double lr = 1e-3, alpha_mat = 0.5;
    std::string preset = "desk", out_dir;
    double width = 0.35;
    std::size_t input_hw = 128, output_dim = 256, calib = 16;
    // plan
    std::string platform = "stm32h7";
    std::uint64_t weights_bytes = 0, table_bytes = 0, activation_bytes = 0, io_bytes = 0;
    // compress
    std::size_t clusters = 4, rank = 8, residual = 0, n = 64, d = 16, value_bytes = 4;
};

int cmd_embed_build(const Args& a) {
    auto classes = read_template_csv_file(a.csv);
    EmbeddingTable t = build_table(classes, parse_precision(a.precision));
    if (a.dim != 0) t = truncate_table(t, a.dim);
    const auto bytes = pack(t);
    write_file_bytes(a.out, bytes);
    json j = envelope("embed-build");
    j["out"] = a.out;
    j["classes"] = t.size();
    j["dim"] = t.dim();
    j["precision"] = to_string(t.precision());
    j["payload_bytes"] = t.payload_bytes();
    j["file_bytes"] = bytes.size();
    emit(j);
    return 0;
}

int cmd_select_dim(const Args& a) {
    const auto d = select_dim(a.classes, a.budget, a.bytes_per_value, a.ladder);
    json j = envelope("select-dim");
    j["classes"] = a.classes;
    j["budget_bytes"] = a.budget;
    j["bytes_per_value"] = a.bytes_per_value;
    j["ladder"] = a.ladder;
    j["dim"] = d;
    j["table_bytes"] = a.classes * d * a.bytes_per_value;
    emit(j);
    return 0;
}

int cmd_infer(const Args& a) {
    const Image img = read_ppm_file(a.image);
    const LayerGraph g = read_graph_file(a.model);
    const EmbeddingTable t = unpack(read_file_bytes(a.table));
    const std::size_t d = a.dim == 0 ? t.dim() : a.dim;
    const Prediction p = run_pipeline(img, g, t, d, parse_path(a.path));
    json j = envelope("infer");
    j["path"] = a.path;
    j["dim_used"] = p.dim_used;
    j["class_index"] = p.class_index;
    j["class_name"] = p.class_name;
    j["similarity"] = r6(p.similarity);
    j["scores"] = json::array();
    for (const auto s : p.scores) j["scores"].push_back(r6(s));
    emit(j);
    return 0;
}

int cmd_train_toy(const Args& a) {
    synthetic::ToyTrainingSetup setup(a.seed, a.alpha_mat);
    setup.opt.epochs = a.epochs;
    setup.opt.batch = a.batch;
    setup.opt.lr = a.lr;
    BatchPair data = setup.train;
    if (a.samples != 64) {
        const auto teacher = SyntheticTeacher::create(setup.cfg.teacher_dim, a.seed);
        std::mt19937_64 rng(a.seed);
        data = teacher.sample(a.samples, rng);
    }
    const auto res = train_toy(data, setup.init, setup.cfg, setup.opt);
    json j = envelope("train-toy");
    j["seed"] = a.seed;
    j["alpha_mat"] = a.alpha_mat;
    j["samples"] = data.size();
    j["epochs"] = a.epochs;
    j["steps"] = res.steps;
    j["curve"] = json::array();
    for (const auto& l : res.curve)
        j["curve"].push_back({{"total", l.total}, {"contrastive", l.contrastive}, {"emb", l.emb}, {"mat", l.mat}});
    if (!res.curve.empty()) {
        const double first = res.curve.front().total, last = res.curve.back().total;
        j["initial_loss"] = first;
        j["final_loss"] = last;
        j["reduction"] = 1.0 - last / first;
    }
    const Matrix vi = res.model.vision.forward(setup.val.images);
    const Matrix vt = res.model.text.forward(setup.val.texts);
    json acc;
    for (const auto d : setup.cfg.dims) acc[std::to_string(d)] = retrieval_accuracy(vi, vt, d);
    j["val_retrieval"] = acc;
    if (!a.out.empty()) {
        write_graph_file(a.out, res.model.vision.to_graph());
        j["out"] = a.out;
    }
    emit(j);
    return 0;
}

int cmd_gradcheck(const Args& a) {
    const auto entries = gradcheck_suite(a.seed);
    json j = envelope("gradcheck");
    j["seed"] = a.seed;
    j["step"] = 1e-5;
    j["tolerance"] = 1e-4;
    bool ok = true;
    j["checks"] = json::array();
    for (const auto& e : entries) {
        ok = ok && e.passed;
        j["checks"].push_back({{"name", e.name},
                               {"coordinates", e.coordinates},
                               {"max_rel_error", e.max_rel_error},
                               {"passed", e.passed}});
    }
    j["passed"] = ok;
    emit(j);
    return ok ? 0 : 3;
}

int cmd_plan(const Args& a) {
    const PlatformSpec spec = load_platform(a.platform);
    PlanInputs in;
    std::optional<LayerGraph> g;
    if (!a.model.empty()) {
        g = read_graph_file(a.model);
        std::optional<EmbeddingTable> t;
        if (!a.table.empty()) t = unpack(read_file_bytes(a.table));
        in = plan_inputs(*g, t ? &*t : nullptr);
    } else if (!a.table.empty()) {
        in.table_bytes = unpack(read_file_bytes(a.table)).payload_bytes();
    }
    if (a.weights_bytes) in.weight_bytes = a.weights_bytes;
    if (a.table_bytes) in.table_bytes = a.table_bytes;
    if (a.activation_bytes) in.activation_bytes = a.activation_bytes;
    if (a.io_bytes) in.io_bytes = a.io_bytes;

    const auto report = plan(in, spec);
    json j = envelope("plan");
    j["layout"] = layout_json(report);
    if (a.dim != 0) {
        try {
            j["max_classes"] = max_classes(spec, in, a.dim, a.bytes_per_value);
        } catch (const Error& e) {
            if (e.code() != ErrorCode::InfeasibleBase) throw;
            j["max_classes"] = nullptr;
        }
    }
    j["diagram"] = render_layout(report);
    emit(j);
    std::cerr << render_layout(report);
    return report.feasible ? 0 : 2;
}

int cmd_compress_embed(const Args& a) {
    const EmbeddingTable t = unpack(read_file_bytes(a.table));
    const Matrix e = table_matrix(t);
    const auto clr = decompose(e, a.clusters, a.rank, a.residual, a.seed);
    const double err = frobenius_norm(sub(e, reconstruct(clr)));
    json j = envelope("compress embed");
    j["seed"] = a.seed;
    j["rows"] = clr.rows;
    j["cols"] = clr.cols;
    j["clusters"] = clr.clusters();
    j["rank"] = clr.rank;
    j["residual_entries"] = clr.residual.size();
    j["factor_values"] = clr.factor_values();
    j["bytes_per_value"] = a.value_bytes;
    j["dense_bytes"] = clr.rows * clr.cols * a.value_bytes;
    j["stored_bytes"] = stored_bytes(clr, a.value_bytes);
    j["compression_ratio"] = r6(compression_ratio(clr, a.value_bytes));
    j["frobenius_error"] = r6(err);
    j["relative_error"] = r6(err / frobenius_norm(e));
    if (!a.out.empty()) {
        write_file_bytes(a.out, serialize_factors(clr));
        j["out"] = a.out;
    }
    emit(j);
    return 0;
}

int cmd_compress_bench(const Args& a) {
    std::mt19937_64 rng(a.seed);
    std::normal_distribution<double> nd;
    auto rand = [&] {
        Matrix m(a.n, a.d);
        for (auto& x : m.data()) x = nd(rng);
        return m;
    };
    const Matrix q = rand(), k = rand(), v = rand();
    OpCounter lin, naive;
    const Matrix o1 = linear_attention(q, k, v, &lin);
    const Matrix o2 = linear_attention_naive(q, k, v, &naive);
    double diff = 0.0;
    for (std::size_t i = 0; i < o1.data().size(); ++i) diff = std::max(diff, std::abs(o1.data()[i] - o2.data()[i]));
    json j = envelope("compress bench-attn");
    j["seed"] = a.seed;
    j["n"] = a.n;
    j["d"] = a.d;
    j["linear_multiplies"] = lin.multiplies;
    j["naive_multiplies"] = naive.multiplies;
    j["max_abs_diff"] = diff;
    const auto w = AttentionWeights::random(a.d, a.seed);
    j["standard_attention_params"] = w.parameter_count();
    j["fused_attention_params"] = FusedAttentionWeights::fuse(w).parameter_count();
    emit(j);
    return 0;
}

int cmd_make_model(const Args& a) {
    LayerGraph g;
    if (a.preset == "desk")
        g = desk_preset(a.seed, a.output_dim);
    else if (a.preset == "mobilenet")
        g = mobilenet_v2(a.width, a.input_hw, a.output_dim, a.seed);
    else
        throw Error(ErrorCode::InvalidArgument, "preset must be desk or mobilenet");
    if (a.calib > 0) {
        std::mt19937_64 rng(a.seed);
        std::vector<Tensor> samples;
        for (std::size_t i = 0; i < a.calib; ++i)
            samples.push_back(preprocess(synthetic::smooth_image(rng), g.input_shape.h, g.input_shape.w));
        g = calibrate(g, samples);
    }
    write_graph_file(a.out, g);
    json j = envelope("make-model");
    j["seed"] = a.seed;
    j["preset"] = a.preset;
    j["out"] = a.out;
    j["parameters"] = g.param_count();
    j["calibrated"] = g.calibrated;
    j["int8_bytes"] = model_size_bytes(g, Precision::I8);
    j["f32_bytes"] = model_size_bytes(g, Precision::F32);
    j["peak_activation_bytes_int8"] = peak_activation(g, 1);
    emit(j);
    return 0;
}

int cmd_make_demo(const Args& a) {
    namespace fs = std::filesystem;
    fs::create_directories(a.out_dir);
    synthetic::ZeroShotSetup setup(a.seed, a.classes == 0 ? 10 : a.classes);
    const auto dir = fs::path(a.out_dir);
    write_graph_file((dir / "model.tvg").string(), setup.quantized);
    write_csv((dir / "classes.csv").string(), setup.classes);
    write_file_bytes((dir / "query.ppm").string(), write_ppm(setup.query_image()));
    json j = envelope("make-demo");
    j["seed"] = a.seed;
    j["model"] = (dir / "model.tvg").string();
    j["csv"] = (dir / "classes.csv").string();
    j["image"] = (dir / "query.ppm").string();
    emit(j);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"tvlm: zero-shot classification toolkit for microcontrollers"};
    app.require_subcommand(1);
    Args a;
    std::function<int()> run;

    auto* eb = app.add_subcommand("embed-build", "Build a TVE1 class table from a template CSV");
    eb->add_option("--csv", a.csv, "CSV with header class,template,e0..")->required();
    eb->add_option("--precision", a.precision, "f32, f16, i8 or i4")->capture_default_str();
    eb->add_option("--dim", a.dim, "Truncate prototypes to this prefix (0 keeps all)");
    eb->add_option("--out", a.out, "Output TVE1 file")->required();
    eb->callback([&] { run = [&] { return cmd_embed_build(a); }; });

    auto* sd = app.add_subcommand("select-dim", "Largest ladder dimension whose table fits the budget");
    sd->add_option("--classes", a.classes, "Number of classes K")->required();
    sd->add_option("--budget", a.budget, "Flash budget in bytes")->required();
    sd->add_option("--bytes-per-value", a.bytes_per_value, "Bytes per stored value")->capture_default_str();
    sd->add_option("--ladder", a.ladder, "Comma separated ladder")->delimiter(',')->capture_default_str();
    sd->callback([&] { run = [&] { return cmd_select_dim(a); }; });

    auto* inf = app.add_subcommand("infer", "Classify one PPM image");
    inf->add_option("--image", a.image, "P6 PPM image")->required();
    inf->add_option("--model", a.model, "TVG1 encoder")->required();
    inf->add_option("--table", a.table, "TVE1 class table")->required();
    inf->add_option("--dim", a.dim, "Embedding prefix length (0 uses the table width)");
    inf->add_option("--path", a.path, "i8 or f32")->capture_default_str();
    inf->callback([&] { run = [&] { return cmd_infer(a); }; });

    auto* tt = app.add_subcommand("train-toy", "Distil the toy student from the synthetic teacher");
    tt->add_option("--seed", a.seed, "Random seed")->capture_default_str();
    tt->add_option("--epochs", a.epochs, "Epochs")->capture_default_str();
    tt->add_option("--batch", a.batch, "Batch size")->capture_default_str();
    tt->add_option("--samples", a.samples, "Training pairs")->capture_default_str();
    tt->add_option("--lr", a.lr, "Peak learning rate")->capture_default_str();
    tt->add_option("--alpha-mat", a.alpha_mat, "Matryoshka loss weight")->capture_default_str();
    tt->add_option("--out", a.out, "Write the vision tower as TVG1");
    tt->callback([&] { run = [&] { return cmd_train_toy(a); }; });

    auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every loss gradient");
    gc->add_option("--seed", a.seed, "Random seed")->capture_default_str();
    gc->callback([&] { run = [&] { return cmd_gradcheck(a); }; });

    auto* pl = app.add_subcommand("plan", "Static flash/SRAM layout for a platform");
    pl->add_option("--model", a.model, "TVG1 encoder");
    pl->add_option("--table", a.table, "TVE1 class table");
    pl->add_option("--platform", a.platform, "Preset name or platform spec file")->capture_default_str();
    pl->add_option("--weights-bytes", a.weights_bytes, "Override model weight bytes");
    pl->add_option("--table-bytes", a.table_bytes, "Override table bytes");
    pl->add_option("--activation-bytes", a.activation_bytes, "Override peak activation bytes");
    pl->add_option("--io-bytes", a.io_bytes, "Override I/O buffer bytes");
    pl->add_option("--dim", a.dim, "Also report the class capacity at this dimension");
    pl->add_option("--bytes-per-value", a.bytes_per_value, "Bytes per table value")->capture_default_str();
    pl->callback([&] { run = [&] { return cmd_plan(a); }; });

    auto* cp = app.add_subcommand("compress", "Compression experiments");
    cp->require_subcommand(1);
    auto* ce = cp->add_subcommand("embed", "Clustered low-rank factorisation of a class table");
    ce->add_option("--table", a.table, "TVE1 class table")->required();
    ce->add_option("--clusters", a.clusters, "Cluster count")->capture_default_str();
    ce->add_option("--rank", a.rank, "Rank per cluster")->capture_default_str();
    ce->add_option("--residual", a.residual, "Sparse residual budget")->capture_default_str();
    ce->add_option("--bytes-per-value", a.value_bytes, "Bytes per stored value")->capture_default_str();
    ce->add_option("--seed", a.seed, "k-means seed")->capture_default_str();
    ce->add_option("--out", a.out, "Output TVC1 file");
    ce->callback([&] { run = [&] { return cmd_compress_embed(a); }; });
    auto* cb = cp->add_subcommand("bench-attn", "Multiply counts of naive and linear attention");
    cb->add_option("--n", a.n, "Sequence length")->capture_default_str();
    cb->add_option("--d", a.d, "Width")->capture_default_str();
    cb->add_option("--seed", a.seed, "Random seed")->capture_default_str();
    cb->callback([&] { run = [&] { return cmd_compress_bench(a); }; });

    auto* mm = app.add_subcommand("make-model", "Write a randomly initialised encoder");
    mm->add_option("--preset", a.preset, "desk or mobilenet")->capture_default_str();
    mm->add_option("--width", a.width, "MobileNetV2 width multiplier")->capture_default_str();
    mm->add_option("--input", a.input_hw, "MobileNetV2 input size")->capture_default_str();
    mm->add_option("--output-dim", a.output_dim, "Embedding width")->capture_default_str();
    mm->add_option("--calibrate", a.calib, "Synthetic calibration images (0 skips)")->capture_default_str();
    mm->add_option("--seed", a.seed, "Random seed")->capture_default_str();
    mm->add_option("--out", a.out, "Output TVG1 file")->required();
    mm->callback([&] { run = [&] { return cmd_make_model(a); }; });

    auto* md = app.add_subcommand("make-demo", "Write a calibrated encoder, class CSV and query image");
    md->add_option("--out-dir", a.out_dir, "Output directory")->required();
    md->add_option("--classes", a.classes, "Number of classes")->default_val(10);
    md->add_option("--seed", a.seed, "Random seed")->capture_default_str();
    md->callback([&] { run = [&] { return cmd_make_demo(a); }; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        return run();
    } catch (const Error& e) {
        json j = envelope("error");
        j["error"] = to_string(e.code());
        j["message"] = e.what();
        std::cerr << j.dump() << "\n";
        return is_degenerate_input(e.code()) ? 2 : 3;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 3;
    }
}

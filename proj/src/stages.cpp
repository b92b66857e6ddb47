#include "omat/stages.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "omat/checkpoint.hpp"
#include "omat/error.hpp"
#include "omat/rng.hpp"

namespace omat::harness {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

// ---------------------------------------------------------------- utilities

// Shortest round-trip decimal form; shared by JSON and CSV cells so both
// emissions are byte-stable for identical doubles.
std::string jnum(double v) { return json(v).dump(); }

std::string read_text(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw ArtifactError("cannot read " + p.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_text(const fs::path& p, const std::string& s) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw ArtifactError("cannot open " + p.string() + " for writing");
    f.write(s.data(), static_cast<std::streamsize>(s.size()));
    if (!f) throw ArtifactError("short write to " + p.string());
}

json read_json_file(const fs::path& p) {
    try {
        return json::parse(read_text(p));
    } catch (const json::exception& e) {
        throw ArtifactError("malformed JSON in " + p.string() + ": " + e.what());
    }
}

void write_json_file(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }
void write_json_file(const fs::path& p, const ordered_json& j) { write_text(p, j.dump(2) + "\n"); }

std::string pct(double frac) {
    std::ostringstream ss;
    ss << std::fixed << std::setprecision(1) << frac * 100.0 << "%";
    return ss.str();
}

std::string fixed3(double v) {
    std::ostringstream ss;
    ss << std::fixed << std::setprecision(3) << v;
    return ss.str();
}

// Index-addressed fan-out: results land in caller-owned slots, so the merge
// order is the item order no matter how threads interleave.
template <typename F>
void parallel_for(std::size_t n, std::size_t threads, F&& body) {
    const std::size_t w = std::min(threads, n);
    if (w <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(w);
    std::vector<std::thread> pool;
    pool.reserve(w);
    for (std::size_t t = 0; t < w; ++t) {
        pool.emplace_back([&, t] {
            try {
                for (std::size_t i = next++; i < n; i = next++) body(i);
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

// ------------------------------------------------------------ the manifest

fs::path manifest_path(const Ctx& ctx) { return ctx.out / "manifest.json"; }

json load_manifest_checked(const Ctx& ctx, const std::string& who) {
    const fs::path p = manifest_path(ctx);
    if (!fs::exists(p))
        throw ArtifactError(who + ": no manifest.json in " + ctx.out.string() +
                            "; run gen-data first");
    json m = read_json_file(p);
    const std::string recorded = m.value("config_digest", "");
    if (recorded != ctx.cfg.digest)
        throw ArtifactError(who + ": config digest mismatch (artifacts were produced under " +
                            recorded + ", current config is " + ctx.cfg.digest + ")");
    return m;
}

// ---------------------------------------------------- shared study fixtures

std::uint64_t sub_seed(const Ctx& ctx, const std::string& label) {
    return seed_for(ctx.cfg.master_seed, label);
}

Tensor classes_tensor(const std::vector<std::size_t>& v) {
    std::vector<double> d(v.begin(), v.end());
    return Tensor({v.size()}, std::move(d));
}

std::vector<std::size_t> classes_vec(const Tensor& t) {
    std::vector<std::size_t> v(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) v[i] = static_cast<std::size_t>(t.data[i]);
    return v;
}

std::map<std::string, Tensor> read_tensor_map(const fs::path& p) {
    std::map<std::string, Tensor> out;
    for (auto& nt : ckpt::read_container(p)) out.emplace(std::move(nt.name), std::move(nt.value));
    return out;
}

const Tensor& map_get(const std::map<std::string, Tensor>& m, const std::string& key,
                      const fs::path& p) {
    auto it = m.find(key);
    if (it == m.end())
        throw ArtifactError("checkpoint: " + p.string() + " is missing tensor '" + key + "'");
    return it->second;
}

detector::LabeledSet uniform_set(Tensor images, double label, const std::string& prov) {
    detector::LabeledSet s;
    const std::size_t n = images.shape.at(0);
    s.images = std::move(images);
    s.labels.assign(n, label);
    s.provenance.assign(n, prov);
    return s;
}

struct RealData {
    Tensor train_images;
    std::vector<std::size_t> train_classes;
    Tensor eval_images;
    std::vector<std::size_t> eval_classes;
};

RealData load_real_data(const Ctx& ctx) {
    const fs::path p = ctx.out / "data.bin";
    auto m = read_tensor_map(p);
    RealData d;
    d.train_images = map_get(m, "train.images", p);
    d.train_classes = classes_vec(map_get(m, "train.classes", p));
    d.eval_images = map_get(m, "eval.images", p);
    d.eval_classes = classes_vec(map_get(m, "eval.classes", p));
    return d;
}

detector::LabeledSet load_train_fakes(const Ctx& ctx) {
    const fs::path p = ctx.out / "fakes.bin";
    auto m = read_tensor_map(p);
    return uniform_set(map_get(m, "images", p), 1.0, "fake:seen");
}

struct AdvData {
    detector::LabeledSet set;                 // label 1, provenance "adv"
    std::vector<attacks::HarvestItem> manifest;
    Tensor latents;                           // [n, latent_numel]
};

AdvData load_x_adv(const Ctx& ctx) {
    const fs::path p = ctx.out / "x_adv.bin";
    auto m = read_tensor_map(p);
    AdvData d;
    d.set = uniform_set(map_get(m, "images", p), 1.0, "adv");
    d.latents = map_get(m, "latents", p);
    const Tensor& man = map_get(m, "manifest", p);
    if (man.shape.size() != 2 || man.shape[1] != 4)
        throw ArtifactError("checkpoint: bad manifest tensor in " + p.string());
    for (std::size_t r = 0; r < man.shape[0]; ++r) {
        attacks::HarvestItem it;
        it.cls = static_cast<std::size_t>(man.data[4 * r + 0]);
        it.seed = static_cast<std::uint64_t>(man.data[4 * r + 1]);
        it.steps = static_cast<std::size_t>(man.data[4 * r + 2]);
        it.logit_final = man.data[4 * r + 3];
        d.manifest.push_back(it);
    }
    return d;
}

std::string zoo_file(const std::string& id) { return "zoo_" + id + ".bin"; }

diffusion::Generator load_seen_generator(const Ctx& ctx) {
    return ckpt::load_generator(ctx.out / zoo_file("seen"));
}

std::vector<std::string> zoo_ids(const Ctx& ctx) {
    const json z = read_json_file(ctx.out / "zoo.json");
    std::vector<std::string> ids;
    for (const auto& id : z.at("ids")) ids.push_back(id.get<std::string>());
    if (ids.empty() || ids.front() != "seen")
        throw ArtifactError("zoo.json does not list 'seen' first");
    return ids;
}

// Toy data spec used for generator training and gen-data's train split.
diffusion::ToyDatasetSpec train_data_spec(const Ctx& ctx) {
    diffusion::ToyDatasetSpec spec = ctx.cfg.data;
    spec.seed = sub_seed(ctx, "data/train");
    return spec;
}

// One generated image as a flat row, from a per-item derived seed so the
// fan-out is deterministic under any worker count.
std::vector<double> sample_row(const diffusion::Generator& gen, std::uint64_t seed,
                               std::size_t c) {
    Tensor z = attacks::initial_latent(gen, seed);
    Tensor x = diffusion::sample(gen, z, c);
    return x.data;
}

// Balanced fake image matrix: item i covers class i % C, instance i / C.
Tensor fake_matrix(const Ctx& ctx, const diffusion::Generator& gen, std::size_t n,
                   const std::string& label_prefix, std::vector<std::size_t>* classes_out) {
    const std::size_t C = ctx.cfg.data.n_classes;
    const std::size_t w = gen.image_numel();
    std::vector<double> rows(n * w);
    std::vector<std::size_t> classes(n);
    parallel_for(n, ctx.cfg.threads, [&](std::size_t i) {
        const std::size_t c = i % C;
        const std::string label =
            label_prefix + "/" + std::to_string(c) + "/" + std::to_string(i / C);
        const auto row = sample_row(gen, sub_seed(ctx, label), c);
        std::copy(row.begin(), row.end(), rows.begin() + static_cast<std::ptrdiff_t>(i * w));
        classes[i] = c;
    });
    if (classes_out) *classes_out = std::move(classes);
    return Tensor({n, w}, std::move(rows));
}

// Shared by eval and ablate-pixel so both score against identical sets.
std::map<std::string, detector::LabeledSet> build_eval_sets(
    const Ctx& ctx, const std::vector<diffusion::Generator>& zoo) {
    std::map<std::string, detector::LabeledSet> sets;
    RealData data = load_real_data(ctx);
    sets["real"] = uniform_set(std::move(data.eval_images), 0.0, "real");
    const std::size_t n = ctx.cfg.eval_per_class * ctx.cfg.data.n_classes;
    for (const auto& gen : zoo) {
        const std::string name = "fake:" + gen.id;
        sets[name] = uniform_set(fake_matrix(ctx, gen, n, "eval/fakes/" + gen.id, nullptr),
                                 1.0, name);
    }
    return sets;
}

struct NamedDetector {
    std::string name;
    detector::Detector det;
};

// Base detector plus every fine-tuned strategy recorded by the omat stage.
std::vector<NamedDetector> load_detector_rows(const Ctx& ctx) {
    std::vector<NamedDetector> rows;
    rows.push_back({"base", ckpt::load_detector(ctx.out / "detector_base.bin")});
    const json om = read_json_file(ctx.out / "omat.json");
    for (const auto& row : om.at("rows")) {
        rows.push_back({row.at("name").get<std::string>(),
                        ckpt::load_detector(ctx.out / row.at("file").get<std::string>())});
    }
    return rows;
}

std::vector<std::string> omat_detector_files(const Ctx& ctx) {
    std::vector<std::string> files{"omat.json"};
    const json om = read_json_file(ctx.out / "omat.json");
    for (const auto& row : om.at("rows")) files.push_back(row.at("file").get<std::string>());
    return files;
}

std::vector<std::size_t> all_classes(const Ctx& ctx) {
    std::vector<std::size_t> cs(ctx.cfg.data.n_classes);
    for (std::size_t i = 0; i < cs.size(); ++i) cs[i] = i;
    return cs;
}

double mean_unseen(const detector::EvalReport& rep) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& [name, m] : rep.per_set) {
        if (name.rfind("fake:unseen", 0) == 0) {
            sum += m.acc;
            ++n;
        }
    }
    return n ? sum / static_cast<double>(n) : 0.0;
}

json eval_row_json(const std::string& name, const detector::EvalReport& rep) {
    json sets = json::object();
    for (const auto& [sname, m] : rep.per_set) {
        json cell;
        cell["acc"] = m.acc;
        cell["fake_acc"] = m.fake_acc ? json(*m.fake_acc) : json(nullptr);
        cell["real_acc"] = m.real_acc ? json(*m.real_acc) : json(nullptr);
        cell["n"] = m.n;
        sets[sname] = cell;
    }
    json row;
    row["name"] = name;
    row["sets"] = sets;
    row["avg_all"] = rep.avg_acc;
    row["avg_unseen"] = mean_unseen(rep);
    row["seen_acc"] = rep.per_set.at("fake:seen").acc;
    row["real_acc"] = rep.per_set.at("real").acc;
    return row;
}

// Pixel variant row names like fgsm(0.03) / pgd(0.03,0.005,20).
std::string pixel_row_name(const attacks::PixelAttackConfig& p) {
    std::string s = attacks::pixel_kind_name(p.kind);
    s += "(" + jnum(p.epsilon);
    if (p.kind != attacks::PixelKind::Fgsm)
        s += "," + jnum(p.alpha) + "," + std::to_string(p.iters);
    return s + ")";
}

// The seen member's construction, matching the zoo builder's derivation so a
// standalone train-gen reproduces zoo_seen.bin bit for bit.
diffusion::Generator seen_skeleton(const Ctx& ctx) {
    using diffusion::Generator;
    Generator g;
    g.id = "seen";
    g.kind = Generator::Kind::Ddim;
    g.n_classes = ctx.cfg.data.n_classes;
    g.schedule = diffusion::make_schedule(diffusion::ScheduleKind::Linear, 100);
    Rng rng(seed_for(sub_seed(ctx, "zoo"), "zoo/init/seen"));
    g.denoiser = diffusion::Denoiser::init(shape_numel(g.latent_shape), g.n_classes,
                                           {128, 128}, rng);
    g.decoder = diffusion::bilinear_decoder_matrix();
    g.inference_steps = 10;
    return g;
}

std::vector<HistogramBin> probe_histogram(const json& probe, std::size_t max_steps) {
    constexpr std::size_t kWidth = 10;
    const std::size_t bins = (max_steps + kWidth - 1) / kWidth;
    std::vector<HistogramBin> hist(bins);
    for (std::size_t b = 0; b < bins; ++b) {
        hist[b].lo = b * kWidth;
        hist[b].hi = std::min(max_steps, (b + 1) * kWidth);
    }
    for (const auto& a : probe.at("attempts")) {
        if (!a.at("success").get<bool>()) continue;
        const std::size_t steps = a.at("steps").get<std::size_t>();
        hist[std::min(steps / kWidth, bins - 1)].count++;
    }
    return hist;
}

} // namespace

// ------------------------------------------------------- manifest interface

void note_outputs(const Ctx& ctx, const std::string& stage,
                  std::span<const std::string> files, const std::string& summary, bool reset) {
    json m;
    if (!reset && fs::exists(manifest_path(ctx))) {
        m = load_manifest_checked(ctx, stage);
    } else {
        m["files"] = json::object();
        m["stages"] = json::object();
    }
    m["config_digest"] = ctx.cfg.digest;
    for (const auto& f : files) m["files"][f] = ckpt::file_digest(ctx.out / f);
    json entry;
    entry["summary"] = summary;
    entry["outputs"] = files;
    m["stages"][stage] = entry;
    write_json_file(manifest_path(ctx), m);
}

void require_inputs(const Ctx& ctx, const std::string& consumer,
                    std::span<const std::string> files) {
    const json m = load_manifest_checked(ctx, consumer);
    for (const auto& f : files) {
        if (!m.at("files").contains(f))
            throw ArtifactError(consumer + ": upstream artifact " + f +
                                " was not produced in this study");
        const fs::path p = ctx.out / f;
        if (!fs::exists(p))
            throw ArtifactError(consumer + ": upstream artifact " + f + " is missing");
        const std::string expect = m.at("files").at(f).get<std::string>();
        const std::string found = ckpt::file_digest(p);
        if (found != expect)
            throw ArtifactError(consumer + ": upstream artifact mismatch: " + f +
                                " (recorded " + expect + ", found " + found + ")");
    }
}

// ------------------------------------------------------------------- stages

std::string stage_gen_data(const Ctx& ctx) {
    diffusion::ToyDatasetSpec train_spec = train_data_spec(ctx);
    diffusion::ImageSet train = diffusion::make_toy_dataset(train_spec, ctx.cfg.train_per_class);

    diffusion::ToyDatasetSpec eval_spec = ctx.cfg.data;
    eval_spec.seed = sub_seed(ctx, "data/eval");
    diffusion::ImageSet evalr = diffusion::make_toy_dataset(eval_spec, ctx.cfg.eval_per_class);

    std::vector<ckpt::NamedTensor> items;
    items.push_back({"train.images", train.images});
    items.push_back({"train.classes", classes_tensor(train.classes)});
    items.push_back({"eval.images", evalr.images});
    items.push_back({"eval.classes", classes_tensor(evalr.classes)});
    ckpt::write_container(ctx.out / "data.bin", items);

    std::ostringstream ss;
    ss << "gen-data: " << train.classes.size() << " train + " << evalr.classes.size()
       << " eval real images across " << ctx.cfg.data.n_classes << " classes -> data.bin";
    const std::string summary = ss.str();
    const std::vector<std::string> outs{"data.bin"};
    note_outputs(ctx, "gen-data", outs, summary, /*reset=*/true);
    return summary;
}

std::string stage_train_gen(const Ctx& ctx) {
    diffusion::DenoiserTrainConfig dn = ctx.cfg.zoo.dn;
    dn.seed = seed_for(sub_seed(ctx, "zoo"), "zoo/train/seen");
    auto res = diffusion::train_denoiser(train_data_spec(ctx), seen_skeleton(ctx), dn);
    ckpt::save_generator(ctx.out / "gen_seen.bin", res.gen);

    std::string csv = "step,loss\n";
    for (std::size_t i = 0; i < res.losses.size(); ++i)
        csv += std::to_string(i) + "," + jnum(res.losses[i]) + "\n";
    write_text(ctx.out / "denoiser_loss.csv", csv);

    std::ostringstream ss;
    ss << "train-gen: seen denoiser, " << res.losses.size() << " steps, loss "
       << fixed3(res.losses.front()) << " -> " << fixed3(res.losses.back())
       << " -> gen_seen.bin";
    const std::string summary = ss.str();
    const std::vector<std::string> outs{"gen_seen.bin", "denoiser_loss.csv"};
    note_outputs(ctx, "train-gen", outs, summary);
    return summary;
}

std::string stage_build_zoo(const Ctx& ctx) {
    const auto zoo =
        diffusion::build_generator_zoo(train_data_spec(ctx), ctx.cfg.zoo, sub_seed(ctx, "zoo"));

    std::vector<std::string> outs;
    json ids = json::array();
    for (const auto& gen : zoo) {
        ckpt::save_generator(ctx.out / zoo_file(gen.id), gen);
        outs.push_back(zoo_file(gen.id));
        ids.push_back(gen.id);
    }
    json zj;
    zj["ids"] = ids;
    write_json_file(ctx.out / "zoo.json", zj);
    outs.push_back("zoo.json");

    std::ostringstream ss;
    ss << "build-zoo: " << zoo.size() << " generators (seen + " << zoo.size() - 1
       << " unseen) -> zoo_*.bin";
    const std::string summary = ss.str();
    note_outputs(ctx, "build-zoo", outs, summary);
    return summary;
}

std::string stage_train_det(const Ctx& ctx) {
    const std::vector<std::string> ins{"data.bin", zoo_file("seen")};
    require_inputs(ctx, "train-det", ins);

    RealData data = load_real_data(ctx);
    detector::LabeledSet real = uniform_set(std::move(data.train_images), 0.0, "real");

    const diffusion::Generator seen = load_seen_generator(ctx);
    const std::size_t n = ctx.cfg.train_per_class * ctx.cfg.data.n_classes;
    std::vector<std::size_t> classes;
    Tensor fakes = fake_matrix(ctx, seen, n, "detector/fakes", &classes);
    {
        std::vector<ckpt::NamedTensor> items;
        items.push_back({"images", fakes});
        items.push_back({"classes", classes_tensor(classes)});
        ckpt::write_container(ctx.out / "fakes.bin", items);
    }
    detector::LabeledSet fake = uniform_set(std::move(fakes), 1.0, "fake:seen");

    detector::DetectorTrainConfig dcfg = ctx.cfg.det;
    dcfg.seed = sub_seed(ctx, "detector");
    auto res = detector::train_detector(real, fake, dcfg);
    res.det.id = "base";
    ckpt::save_detector(ctx.out / "detector_base.bin", res.det);

    std::string csv = "epoch,train_loss,train_acc,val_acc\n";
    for (std::size_t e = 0; e < res.history.size(); ++e)
        csv += std::to_string(e + 1) + "," + jnum(res.history[e].train_loss) + "," +
               jnum(res.history[e].train_acc) + "," + jnum(res.history[e].val_acc) + "\n";
    write_text(ctx.out / "det_history.csv", csv);

    const double fake_acc = detector::accuracy(res.det, fake);
    std::ostringstream ss;
    ss << "train-det: " << real.size() << " real + " << fake.size() << " fake, val_acc "
       << fixed3(res.history.back().val_acc) << ", seen-fake acc " << fixed3(fake_acc)
       << " -> detector_base.bin";
    const std::string summary = ss.str();
    const std::vector<std::string> outs{"detector_base.bin", "fakes.bin", "det_history.csv"};
    note_outputs(ctx, "train-det", outs, summary);
    return summary;
}

std::string stage_attack(const Ctx& ctx) {
    const std::vector<std::string> ins{zoo_file("seen"), "detector_base.bin"};
    require_inputs(ctx, "attack", ins);

    const diffusion::Generator seen = load_seen_generator(ctx);
    const detector::Detector base = ckpt::load_detector(ctx.out / "detector_base.bin");

    const std::size_t n = ctx.cfg.probe_seeds;
    std::vector<attacks::AttackOutcome> outcomes(n);
    parallel_for(n, ctx.cfg.threads, [&](std::size_t i) {
        attacks::LatentAttackConfig acfg = ctx.cfg.attack;
        acfg.seed = ctx.cfg.probe_seed_base + i;
        outcomes[i] = attacks::latent_attack(seen, base, ctx.cfg.probe_class, acfg);
    });

    std::size_t n_success = 0;
    json attempts = json::array();
    for (const auto& o : outcomes) {
        n_success += o.success ? 1 : 0;
        json a;
        a["seed"] = o.seed;
        a["success"] = o.success;
        a["steps"] = o.steps_used;
        a["final_logit"] = o.logit_trace.back(); // wall time deliberately omitted
        attempts.push_back(a);
    }
    json probe;
    probe["class"] = ctx.cfg.probe_class;
    probe["max_steps"] = ctx.cfg.attack.max_steps;
    probe["n"] = n;
    probe["n_success"] = n_success;
    probe["success_rate"] = static_cast<double>(n_success) / static_cast<double>(n);
    probe["attempts"] = attempts;
    write_json_file(ctx.out / "attack_probe.json", probe);

    std::string csv = "steps_lo,steps_hi,count\n";
    for (const auto& b : probe_histogram(probe, ctx.cfg.attack.max_steps))
        csv += std::to_string(b.lo) + "," + std::to_string(b.hi) + "," +
               std::to_string(b.count) + "\n";
    write_text(ctx.out / "attack_hist.csv", csv);

    std::ostringstream ss;
    ss << "attack: " << n_success << "/" << n << " probe seeds succeeded ("
       << pct(probe["success_rate"].get<double>()) << ") on class " << ctx.cfg.probe_class
       << " -> attack_probe.json";
    const std::string summary = ss.str();
    const std::vector<std::string> outs{"attack_probe.json", "attack_hist.csv"};
    note_outputs(ctx, "attack", outs, summary);
    return summary;
}

std::string stage_harvest(const Ctx& ctx) {
    const std::vector<std::string> ins{zoo_file("seen"), "detector_base.bin"};
    require_inputs(ctx, "harvest", ins);

    const diffusion::Generator seen = load_seen_generator(ctx);
    const detector::Detector base = ckpt::load_detector(ctx.out / "detector_base.bin");
    const auto classes = all_classes(ctx);

    // One mining pass per depth threshold; per_class splits as evenly as
    // possible (earlier, deeper buckets absorb the remainder) and each bucket
    // walks its own seed range so starting latents never repeat.
    const std::size_t K = ctx.cfg.harvest_taus.size();
    const std::size_t L = seen.latent_numel();
    constexpr std::uint64_t kBucketSeedStride = 1000000;
    std::vector<double> rows, lat, man;
    std::string csv = "tau,class,seed,steps,logit_final\n";
    std::size_t n = 0;
    double steps_sum = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
        const std::size_t count = ctx.cfg.harvest_per_class / K +
                                  (k < ctx.cfg.harvest_per_class % K ? 1 : 0);
        if (count == 0) continue;
        attacks::LatentAttackConfig hcfg = ctx.cfg.attack;
        hcfg.tau = ctx.cfg.harvest_taus[k];
        hcfg.max_steps = ctx.cfg.harvest_max_steps;
        hcfg.lr = ctx.cfg.harvest_lr;
        auto res = attacks::harvest_adv_dataset(seen, base, classes, count, hcfg,
                                                ctx.cfg.budget_factor, k * kBucketSeedStride);
        rows.insert(rows.end(), res.x_adv.images.data.begin(), res.x_adv.images.data.end());
        for (std::size_t i = 0; i < res.manifest.size(); ++i) {
            lat.insert(lat.end(), res.latents[i].data.begin(), res.latents[i].data.end());
            man.push_back(static_cast<double>(res.manifest[i].cls));
            man.push_back(static_cast<double>(res.manifest[i].seed));
            man.push_back(static_cast<double>(res.manifest[i].steps));
            man.push_back(res.manifest[i].logit_final);
            steps_sum += static_cast<double>(res.manifest[i].steps);
            csv += jnum(hcfg.tau) + "," + std::to_string(res.manifest[i].cls) + "," +
                   std::to_string(res.manifest[i].seed) + "," +
                   std::to_string(res.manifest[i].steps) + "," +
                   jnum(res.manifest[i].logit_final) + "\n";
        }
        n += res.manifest.size();
    }

    std::vector<ckpt::NamedTensor> items;
    items.push_back({"images", Tensor({n, seen.image_numel()}, std::move(rows))});
    items.push_back({"labels", Tensor({n}, std::vector<double>(n, 1.0))});
    items.push_back({"latents", Tensor({n, L}, std::move(lat))});
    items.push_back({"manifest", Tensor({n, 4}, std::move(man))});
    ckpt::write_container(ctx.out / "x_adv.bin", items);
    write_text(ctx.out / "x_adv_manifest.csv", csv);

    std::ostringstream ss;
    ss << "harvest: " << n << " adversarial latents (" << ctx.cfg.harvest_per_class
       << "/class), mean steps " << fixed3(steps_sum / static_cast<double>(n))
       << " -> x_adv.bin";
    const std::string summary = ss.str();
    const std::vector<std::string> outs{"x_adv.bin", "x_adv_manifest.csv"};
    note_outputs(ctx, "harvest", outs, summary);
    return summary;
}

std::string stage_omat(const Ctx& ctx) {
    const std::vector<std::string> ins{"data.bin", "fakes.bin", "detector_base.bin", "x_adv.bin"};
    require_inputs(ctx, "omat", ins);

    RealData data = load_real_data(ctx);
    detector::LabeledSet std_set = detector::merge_sets(
        uniform_set(std::move(data.train_images), 0.0, "real"), load_train_fakes(ctx));
    const detector::Detector base = ckpt::load_detector(ctx.out / "detector_base.bin");
    const AdvData adv = load_x_adv(ctx);

    std::vector<std::string> outs;
    json rows = json::array();
    std::ostringstream ss;
    ss << "omat:";
    for (const auto& entry : ctx.cfg.sweep) {
        finetune::OmatConfig oc = entry;
        oc.seed = sub_seed(ctx, "omat");
        auto res = finetune::omat_train(base, std_set, adv.set, oc);

        const std::string name = finetune::sweep_row_name(oc);
        const std::string tok = file_token(name);
        const std::string det_file = "detector_omat_" + tok + ".bin";
        const std::string hist_file = "omat_history_" + tok + ".csv";
        res.det.id = "omat_" + tok;
        ckpt::save_detector(ctx.out / det_file, res.det);

        std::string csv = "epoch,lambda,train_loss,val_acc,adv_acc,score\n";
        for (const auto& e : res.history)
            csv += std::to_string(e.epoch) + "," + jnum(e.lambda) + "," + jnum(e.train_loss) +
                   "," + jnum(e.val_acc) + "," + jnum(e.adv_acc) + "," + jnum(e.score) + "\n";
        write_text(ctx.out / hist_file, csv);

        json row;
        row["name"] = name;
        row["file"] = det_file;
        row["history"] = hist_file;
        row["best_epoch"] = res.best_epoch;
        row["best_score"] = res.history.at(res.best_epoch - 1).score;
        rows.push_back(row);
        outs.push_back(det_file);
        outs.push_back(hist_file);
        ss << " " << name << " best@" << res.best_epoch;
    }
    json om;
    om["primary"] = finetune::sweep_row_name(ctx.cfg.omat);
    om["rows"] = rows;
    write_json_file(ctx.out / "omat.json", om);
    outs.push_back("omat.json");

    const std::string summary = ss.str();
    note_outputs(ctx, "omat", outs, summary);
    return summary;
}

std::string stage_reattack(const Ctx& ctx) {
    std::vector<std::string> ins{zoo_file("seen"), "detector_base.bin"};
    {
        const std::vector<std::string> pre{"omat.json"};
        require_inputs(ctx, "reattack", pre);
    }
    for (const auto& f : omat_detector_files(ctx)) ins.push_back(f);
    require_inputs(ctx, "reattack", ins);

    const diffusion::Generator seen = load_seen_generator(ctx);
    const auto classes = all_classes(ctx);
    attacks::LatentAttackConfig rc = ctx.cfg.attack;
    rc.max_steps = ctx.cfg.reattack_max_steps;

    json rows = json::array();
    std::string csv = "name,n,n_success,success_rate,avg_steps\n";
    std::ostringstream ss;
    ss << "reattack:";
    for (const auto& [name, det] : load_detector_rows(ctx)) {
        const auto rep = attacks::reattack_eval(seen, det, classes,
                                                ctx.cfg.reattack_seeds_per_class, rc,
                                                ctx.cfg.reattack_seed_base);
        json row;
        row["name"] = name;
        row["n"] = rep.n_attempts;
        row["n_success"] = rep.n_success;
        row["success_rate"] = rep.success_rate;
        row["avg_steps"] = rep.avg_steps ? json(*rep.avg_steps) : json(nullptr);
        rows.push_back(row);
        csv += name + "," + std::to_string(rep.n_attempts) + "," +
               std::to_string(rep.n_success) + "," + jnum(rep.success_rate) + "," +
               (rep.avg_steps ? jnum(*rep.avg_steps) : std::string()) + "\n";
        ss << " " << name << " " << pct(rep.success_rate);
    }
    json rj;
    rj["seeds_per_class"] = ctx.cfg.reattack_seeds_per_class;
    rj["max_steps"] = ctx.cfg.reattack_max_steps;
    rj["rows"] = rows;
    write_json_file(ctx.out / "reattack.json", rj);
    write_text(ctx.out / "reattack.csv", csv);

    const std::string summary = ss.str();
    const std::vector<std::string> outs{"reattack.json", "reattack.csv"};
    note_outputs(ctx, "reattack", outs, summary);
    return summary;
}

std::string stage_eval(const Ctx& ctx) {
    std::vector<std::string> ins{"data.bin", "detector_base.bin", "zoo.json"};
    {
        const std::vector<std::string> pre{"zoo.json", "omat.json"};
        require_inputs(ctx, "eval", pre);
    }
    for (const auto& id : zoo_ids(ctx)) ins.push_back(zoo_file(id));
    for (const auto& f : omat_detector_files(ctx)) ins.push_back(f);
    require_inputs(ctx, "eval", ins);

    std::vector<diffusion::Generator> zoo;
    for (const auto& id : zoo_ids(ctx)) zoo.push_back(ckpt::load_generator(ctx.out / zoo_file(id)));
    const auto sets = build_eval_sets(ctx, zoo);

    json rows = json::array();
    std::vector<std::string> columns;
    for (const auto& [name, s] : sets) {
        (void)s;
        columns.push_back(name);
    }

    std::string csv = "detector";
    for (const auto& c : columns) csv += "," + c;
    csv += ",avg_unseen,avg_all\n";

    std::ostringstream ss;
    ss << "eval:";
    for (const auto& [name, det] : load_detector_rows(ctx)) {
        const auto rep = detector::evaluate(det, sets);
        rows.push_back(eval_row_json(name, rep));
        csv += name;
        for (const auto& c : columns) csv += "," + jnum(rep.per_set.at(c).acc);
        csv += "," + jnum(mean_unseen(rep)) + "," + jnum(rep.avg_acc) + "\n";
        ss << " " << name << " avg_unseen " << fixed3(mean_unseen(rep));
    }

    json ej;
    ej["columns"] = columns;
    ej["rows"] = rows;
    write_json_file(ctx.out / "eval.json", ej);
    write_text(ctx.out / "eval.csv", csv);

    const std::string summary = ss.str();
    const std::vector<std::string> outs{"eval.json", "eval.csv"};
    note_outputs(ctx, "eval", outs, summary);
    return summary;
}

std::string stage_ablate_pixel(const Ctx& ctx) {
    std::vector<std::string> ins{"data.bin", "fakes.bin", "detector_base.bin",
                                 "x_adv.bin",  "zoo.json", "omat.json"};
    {
        const std::vector<std::string> pre{"zoo.json", "omat.json"};
        require_inputs(ctx, "ablate-pixel", pre);
    }
    for (const auto& id : zoo_ids(ctx)) ins.push_back(zoo_file(id));
    const json om = read_json_file(ctx.out / "omat.json");
    const std::string primary = om.at("primary").get<std::string>();
    std::string primary_file;
    for (const auto& row : om.at("rows"))
        if (row.at("name").get<std::string>() == primary)
            primary_file = row.at("file").get<std::string>();
    if (primary_file.empty())
        throw ArtifactError("ablate-pixel: omat.json has no row for primary strategy " + primary);
    ins.push_back(primary_file);
    require_inputs(ctx, "ablate-pixel", ins);

    std::vector<diffusion::Generator> zoo;
    for (const auto& id : zoo_ids(ctx)) zoo.push_back(ckpt::load_generator(ctx.out / zoo_file(id)));
    const diffusion::Generator& seen = zoo.front();
    const auto sets = build_eval_sets(ctx, zoo);

    RealData data = load_real_data(ctx);
    detector::LabeledSet std_set = detector::merge_sets(
        uniform_set(std::move(data.train_images), 0.0, "real"), load_train_fakes(ctx));
    const detector::Detector base = ckpt::load_detector(ctx.out / "detector_base.bin");
    const AdvData adv = load_x_adv(ctx);
    const std::size_t n_adv = adv.set.size();

    json rows = json::array();
    auto push_row = [&rows](const std::string& name, const detector::EvalReport& rep,
                            std::optional<std::size_t> best_epoch) {
        json row;
        row["name"] = name;
        row["avg_unseen"] = mean_unseen(rep);
        row["avg_all"] = rep.avg_acc;
        row["best_epoch"] = best_epoch ? json(*best_epoch) : json(nullptr);
        rows.push_back(row);
    };

    push_row("baseline", detector::evaluate(base, sets), std::nullopt);
    {
        const detector::Detector latent_det = ckpt::load_detector(ctx.out / primary_file);
        const json* prow = nullptr;
        for (const auto& row : om.at("rows"))
            if (row.at("name").get<std::string>() == primary) prow = &row;
        push_row("latent", detector::evaluate(latent_det, sets),
                 prow ? std::optional<std::size_t>(prow->at("best_epoch").get<std::size_t>())
                      : std::nullopt);
    }

    // Pixel variants perturb the standard training fakes themselves — the
    // classic adversarial-training recipe. Latent mining, by contrast,
    // synthesizes new images from optimized noise; that asymmetry is the
    // whole point of the comparison. Counts are matched to the latent set so
    // every row trains on equally many adversarial images.
    const detector::LabeledSet train_fakes = load_train_fakes(ctx);
    if (train_fakes.size() < n_adv)
        throw ConfigError("ablate-pixel: adversarial set has " + std::to_string(n_adv) +
                          " rows but only " + std::to_string(train_fakes.size()) +
                          " standard training fakes exist; reduce [harvest] per_class or raise "
                          "[data] train_per_class");
    const std::size_t w = seen.image_numel();
    const Tensor& src = train_fakes.images;

    for (const auto& pcfg : ctx.cfg.pixel_grid) {
        std::vector<double> rows_px(n_adv * w);
        parallel_for(n_adv, ctx.cfg.threads, [&](std::size_t i) {
            Tensor x({1, w}, std::vector<double>(src.data.begin() + static_cast<std::ptrdiff_t>(i * w),
                                                 src.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * w)));
            Tensor adv_x = attacks::pixel_attack(base, x, pcfg);
            std::copy(adv_x.data.begin(), adv_x.data.end(),
                      rows_px.begin() + static_cast<std::ptrdiff_t>(i * w));
        });
        detector::LabeledSet px_set = uniform_set(Tensor({n_adv, w}, std::move(rows_px)), 1.0, "adv");

        finetune::OmatConfig oc = ctx.cfg.omat;
        oc.seed = sub_seed(ctx, "omat"); // identical cfg+seed to the latent run
        auto res = finetune::omat_train(base, std_set, px_set, oc);
        push_row(pixel_row_name(pcfg), detector::evaluate(res.det, sets), res.best_epoch);
    }

    json aj;
    aj["rows"] = rows;
    write_json_file(ctx.out / "ablation.json", aj);

    std::string csv = "variant,avg_unseen,avg_all,best_epoch\n";
    for (const auto& row : rows)
        csv += row.at("name").get<std::string>() + "," + jnum(row.at("avg_unseen").get<double>()) +
               "," + jnum(row.at("avg_all").get<double>()) + "," +
               (row.at("best_epoch").is_null()
                    ? std::string()
                    : std::to_string(row.at("best_epoch").get<std::size_t>())) +
               "\n";
    write_text(ctx.out / "ablation.csv", csv);

    double latent_avg = 0.0, best_pixel = 0.0;
    for (const auto& row : rows) {
        const std::string name = row.at("name").get<std::string>();
        const double v = row.at("avg_unseen").get<double>();
        if (name == "latent") latent_avg = v;
        else if (name != "baseline") best_pixel = std::max(best_pixel, v);
    }
    std::ostringstream ss;
    ss << "ablate-pixel: " << ctx.cfg.pixel_grid.size() << " pixel variants, latent avg_unseen "
       << fixed3(latent_avg) << " vs best pixel " << fixed3(best_pixel) << " -> ablation.json";
    const std::string summary = ss.str();
    const std::vector<std::string> outs{"ablation.json", "ablation.csv"};
    note_outputs(ctx, "ablate-pixel", outs, summary);
    return summary;
}

std::string stage_export_latents(const Ctx& ctx) {
    const std::vector<std::string> ins{zoo_file("seen"), "x_adv.bin"};
    require_inputs(ctx, "export-latents", ins);

    const diffusion::Generator seen = load_seen_generator(ctx);
    const AdvData adv = load_x_adv(ctx);
    if (adv.manifest.empty())
        throw DomainError("export-latents: x_adv.bin holds no successful latents");
    const std::size_t L = seen.latent_numel();

    std::string csv = "kind,class,seed";
    for (std::size_t j = 0; j < L; ++j) csv += ",z" + std::to_string(j);
    csv += "\n";

    for (std::size_t i = 0; i < ctx.cfg.probe_seeds; ++i) {
        const std::uint64_t seed = ctx.cfg.probe_seed_base + i;
        const Tensor z = attacks::initial_latent(seen, seed);
        csv += "rand," + std::to_string(ctx.cfg.probe_class) + "," + std::to_string(seed);
        for (double v : z.data) csv += "," + jnum(v);
        csv += "\n";
    }
    for (std::size_t i = 0; i < adv.manifest.size(); ++i) {
        csv += "adv," + std::to_string(adv.manifest[i].cls) + "," +
               std::to_string(adv.manifest[i].seed);
        for (std::size_t j = 0; j < L; ++j) csv += "," + jnum(adv.latents.data[i * L + j]);
        csv += "\n";
    }
    write_text(ctx.out / "latents.csv", csv);

    std::ostringstream ss;
    ss << "export-latents: " << ctx.cfg.probe_seeds << " rand + " << adv.manifest.size()
       << " adv rows (width " << L << ") -> latents.csv";
    const std::string summary = ss.str();
    const std::vector<std::string> outs{"latents.csv"};
    note_outputs(ctx, "export-latents", outs, summary);
    return summary;
}

RunReport build_report(const Ctx& ctx) {
    const std::vector<std::string> ins{"attack_probe.json", "eval.json", "reattack.json",
                                       "ablation.json"};
    require_inputs(ctx, "report", ins);

    RunReport rep;
    rep.config_digest = ctx.cfg.digest;
    rep.experiment_id = "study-" + ctx.cfg.digest;

    const json ev = read_json_file(ctx.out / "eval.json");
    for (const auto& c : ev.at("columns")) rep.table1_columns.push_back(c.get<std::string>());
    for (const auto& row : ev.at("rows")) {
        Table1Row r;
        r.name = row.at("name").get<std::string>();
        for (const auto& c : rep.table1_columns)
            r.acc[c] = row.at("sets").at(c).at("acc").get<double>();
        r.avg_unseen = row.at("avg_unseen").get<double>();
        r.avg_all = row.at("avg_all").get<double>();
        rep.table1.push_back(std::move(r));
    }

    const json ra = read_json_file(ctx.out / "reattack.json");
    for (const auto& row : ra.at("rows")) {
        Table6Row r;
        r.name = row.at("name").get<std::string>();
        r.n = row.at("n").get<std::size_t>();
        r.n_success = row.at("n_success").get<std::size_t>();
        r.success_rate = row.at("success_rate").get<double>();
        if (!row.at("avg_steps").is_null()) r.avg_steps = row.at("avg_steps").get<double>();
        rep.table6.push_back(std::move(r));
    }

    const json ab = read_json_file(ctx.out / "ablation.json");
    for (const auto& row : ab.at("rows")) {
        Table5Row r;
        r.name = row.at("name").get<std::string>();
        r.avg_unseen = row.at("avg_unseen").get<double>();
        r.avg_all = row.at("avg_all").get<double>();
        if (!row.at("best_epoch").is_null()) r.best_epoch = row.at("best_epoch").get<std::size_t>();
        rep.table5.push_back(std::move(r));
    }

    const json probe = read_json_file(ctx.out / "attack_probe.json");
    rep.histogram = probe_histogram(probe, probe.at("max_steps").get<std::size_t>());
    return rep;
}

std::string stage_report(const Ctx& ctx) {
    const RunReport rep = build_report(ctx);

    ordered_json tj;
    tj["experiment_id"] = rep.experiment_id;
    tj["config_digest"] = rep.config_digest;
    ordered_json t1;
    t1["columns"] = rep.table1_columns;
    t1["rows"] = ordered_json::array();
    for (const auto& r : rep.table1) {
        ordered_json row;
        row["name"] = r.name;
        for (const auto& [k, v] : r.acc) row["acc"][k] = v;
        row["avg_unseen"] = r.avg_unseen;
        row["avg_all"] = r.avg_all;
        t1["rows"].push_back(row);
    }
    ordered_json t6;
    t6["rows"] = ordered_json::array();
    for (const auto& r : rep.table6) {
        ordered_json row;
        row["name"] = r.name;
        row["n"] = r.n;
        row["n_success"] = r.n_success;
        row["success_rate"] = r.success_rate;
        row["avg_steps"] = r.avg_steps ? ordered_json(*r.avg_steps) : ordered_json(nullptr);
        t6["rows"].push_back(row);
    }
    ordered_json t5;
    t5["rows"] = ordered_json::array();
    for (const auto& r : rep.table5) {
        ordered_json row;
        row["name"] = r.name;
        row["avg_unseen"] = r.avg_unseen;
        row["avg_all"] = r.avg_all;
        row["best_epoch"] = r.best_epoch ? ordered_json(*r.best_epoch) : ordered_json(nullptr);
        t5["rows"].push_back(row);
    }
    ordered_json hist;
    hist["bin_width"] = 10;
    hist["bins"] = ordered_json::array();
    for (const auto& b : rep.histogram) {
        ordered_json bin;
        bin["lo"] = b.lo;
        bin["hi"] = b.hi;
        bin["count"] = b.count;
        hist["bins"].push_back(bin);
    }
    tj["tables"]["table1"] = t1;
    tj["tables"]["table6"] = t6;
    tj["tables"]["table5"] = t5;
    tj["tables"]["histogram"] = hist;
    tj["timing_ref"] = "run_meta.json"; // wall times stay out of the stable tables
    write_json_file(ctx.out / "tables.json", tj);

    std::string csv = "# table1\ndetector";
    for (const auto& c : rep.table1_columns) csv += "," + c;
    csv += ",avg_unseen,avg_all\n";
    for (const auto& r : rep.table1) {
        csv += r.name;
        for (const auto& c : rep.table1_columns) csv += "," + jnum(r.acc.at(c));
        csv += "," + jnum(r.avg_unseen) + "," + jnum(r.avg_all) + "\n";
    }
    csv += "\n# table6\ndetector,n,n_success,success_rate,avg_steps\n";
    for (const auto& r : rep.table6)
        csv += r.name + "," + std::to_string(r.n) + "," + std::to_string(r.n_success) + "," +
               jnum(r.success_rate) + "," + (r.avg_steps ? jnum(*r.avg_steps) : std::string()) +
               "\n";
    csv += "\n# table5\nvariant,avg_unseen,avg_all,best_epoch\n";
    for (const auto& r : rep.table5)
        csv += r.name + "," + jnum(r.avg_unseen) + "," + jnum(r.avg_all) + "," +
               (r.best_epoch ? std::to_string(*r.best_epoch) : std::string()) + "\n";
    csv += "\n# histogram\nsteps_lo,steps_hi,count\n";
    for (const auto& b : rep.histogram)
        csv += std::to_string(b.lo) + "," + std::to_string(b.hi) + "," +
               std::to_string(b.count) + "\n";
    write_text(ctx.out / "tables.csv", csv);

    std::ostringstream ss;
    ss << "report: tables.json + tables.csv (" << rep.table1_columns.size()
       << " eval columns, " << rep.table6.size() << " robustness rows, " << rep.table5.size()
       << " ablation rows)";
    const std::string summary = ss.str();
    const std::vector<std::string> outs{"tables.json", "tables.csv"};
    note_outputs(ctx, "report", outs, summary);
    return summary;
}

// ---------------------------------------------------------------- dispatch

const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> names{
        "gen-data", "train-gen", "build-zoo",    "train-det",      "attack", "harvest",
        "omat",     "reattack",  "eval",         "ablate-pixel",   "export-latents", "report"};
    return names;
}

std::string run_stage(const Ctx& ctx, const std::string& name) {
    using StageFn = std::string (*)(const Ctx&);
    static const std::map<std::string, StageFn> fns{
        {"gen-data", stage_gen_data},         {"train-gen", stage_train_gen},
        {"build-zoo", stage_build_zoo},       {"train-det", stage_train_det},
        {"attack", stage_attack},             {"harvest", stage_harvest},
        {"omat", stage_omat},                 {"reattack", stage_reattack},
        {"eval", stage_eval},                 {"ablate-pixel", stage_ablate_pixel},
        {"export-latents", stage_export_latents}, {"report", stage_report}};
    auto it = fns.find(name);
    if (it == fns.end()) throw ConfigError("unknown stage '" + name + "'");

    // Fail before any work if the study directory belongs to another config;
    // gen-data is the reset point and exempt.
    if (name != "gen-data" && fs::exists(manifest_path(ctx)))
        load_manifest_checked(ctx, name);

    const auto t0 = std::chrono::steady_clock::now();
    const std::string summary = it->second(ctx);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    // Wall times live here and only here; every other artifact is a pure
    // function of the config.
    const fs::path meta_path = ctx.out / "run_meta.json";
    json meta;
    if (fs::exists(meta_path)) {
        try {
            meta = read_json_file(meta_path);
        } catch (const ArtifactError&) {
            meta = json::object();
        }
    }
    meta["config_digest"] = ctx.cfg.digest;
    meta["threads"] = ctx.cfg.threads;
    meta["stage_seconds"][name] = secs;
    write_json_file(meta_path, meta);

    return summary;
}

} // namespace omat::harness

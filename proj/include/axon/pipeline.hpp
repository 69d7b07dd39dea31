#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "axon/coarsediff.hpp"
#include "axon/config.hpp"
#include "axon/error.hpp"
#include "axon/finediff.hpp"
#include "axon/metrics.hpp"
#include "axon/nn/adam.hpp"
#include "axon/nn/checkpoint.hpp"
#include "axon/phantom.hpp"
#include "axon/preprocess.hpp"
#include "axon/projector.hpp"
#include "axon/srnet.hpp"
#include "axon/training.hpp"
#include "axon/voxcore.hpp"

namespace axon {

namespace fs = std::filesystem;

/// A stage's checkpoint is absent; `stage()` names it (coarse, prior, fine, sr).
class MissingCheckpoint : public Error {
public:
    MissingCheckpoint(std::string stage, const fs::path& path)
        : Error("missing " + stage + " checkpoint " + path.string()), stage_(std::move(stage)) {}
    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose) {
    SeededRng r(seed, fnv1a64(std::string(purpose)));
    return r.next_u64();
}

// ---------------------------------------------------------------------------
// Data

inline PhantomSpec phantom_spec_for(const PipelineConfig& c) {
    PhantomSpec s = default_phantom_spec(c.H);
    const double sp = c.fov_mm / double(c.H);
    s.spacing = {sp, sp, sp};
    s.seed = c.seed;
    return s;
}

inline DatasetOptions dataset_options_for(const PipelineConfig& c) {
    DatasetOptions o;
    o.sid_factor = c.sid_factor;
    o.projection_px = c.r * c.h;
    o.lateral = true;
    return o;
}

inline nlohmann::json dataset_signature(const PipelineConfig& c) {
    const auto o = dataset_options_for(c);
    return {{"phantom", to_json(phantom_spec_for(c))},
            {"count", c.n_phantoms},
            {"sid_factor", o.sid_factor},
            {"projection_px", o.projection_px}};
}

/// Generates the phantom dataset unless an identical one is already present.
inline std::vector<ManifestRecord> ensure_dataset(const PipelineConfig& c, bool force = false) {
    const fs::path dir = c.dataset_path();
    const fs::path manifest = dir / "manifest.jsonl", meta = dir / "dataset.json";
    if (!force && fs::exists(manifest) && fs::exists(meta)) {
        const auto have = nlohmann::json::parse(detail::read_file(meta), nullptr, false);
        const auto want = dataset_signature(c);
        bool same = !have.is_discarded();
        for (auto& [k, v] : want.items()) same = same && have.contains(k) && have[k] == v;
        if (!same)
            throw ConfigError("dataset at " + dir.string() + " was generated with different settings");
        return read_manifest(manifest);
    }
    return generate_dataset(phantom_spec_for(c), c.n_phantoms, dir, dataset_options_for(c));
}

struct Sample {
    ManifestRecord record;
    Volume target;               // Y on the target grid, [-1, 1]
    Volume target_gen;           // Y on the generation grid, [-1, 1]
    std::vector<Projection> drr; // stored DRRs: PA, LATERAL; [0, 1]
    std::vector<Projection> cxr; // X-ray stand-ins registered to the DRRs; [0, 1]

    /// PA (and LATERAL if bi-planar) from the DRRs or the X-ray stand-ins.
    std::vector<const Projection*> views(bool bi_planar, bool use_drr) const {
        const auto& src = use_drr ? drr : cxr;
        std::vector<const Projection*> out{&src[0]};
        if (bi_planar) out.push_back(&src[1]);
        return out;
    }
};

inline Projection load_standardized_pgm(const fs::path& path, View view) {
    Projection p = load_pgm16(path, view);
    for (auto& v : p.data()) v /= 65535.0;
    return p;
}

/// Radiograph stand-in: the DRR with detector noise and a sub-pixel misalignment,
/// then rigidly registered back onto the stored DRR.
inline Projection xray_standin(const PipelineConfig& c, const Volume& hu, const ManifestRecord& rec, View view,
                               const Projection& reference) {
    const auto opt = dataset_options_for(c);
    const auto geo = dataset_geometry(hu, opt);
    const auto& cam = view == View::PA ? geo.pa : geo.lateral;
    const std::uint64_t stream = view == View::PA ? 0xC0 : 0xC1;
    DetectorNoise noise{c.cxr_noise, SeededRng(rec.seed, stream)};
    Projection p = standardize_projection(render_drr(hu_to_attenuation(hu), cam, noise), opt.projection_px,
                                          opt.projection_px);
    SeededRng shift_rng(rec.seed, stream + 0x10);
    const double dx = shift_rng.uniform(-c.cxr_max_shift, c.cxr_max_shift);
    const double dy = shift_rng.uniform(-c.cxr_max_shift, c.cxr_max_shift);
    p = apply_shift(p, {dx, dy, 0});
    const RigidShift2D reg = register_to_reference(p, reference, int(c.register_radius));
    p = apply_shift(p, reg);
    for (auto& v : p.data()) v = std::clamp(v, 0.0, 1.0);
    return p;
}

inline Sample load_sample(const PipelineConfig& c, const ManifestRecord& rec) {
    const fs::path dir = c.dataset_path();
    Sample s;
    s.record = rec;
    const Volume hu = load_vvol(dir / rec.vvol_path);
    s.target = window_and_normalize(hu, {c.window_lo, c.window_hi}, NormTarget::PM1);
    s.target_gen = c.gamma == 1 ? s.target : rescale_to_grid(s.target, {c.w, c.h, c.d});
    s.target_gen.set_domain(Domain::NormalizedPM1);
    if (rec.lateral_path.empty()) throw IoError(IoErrorKind::Format, "dataset sample " + rec.id + " lacks a lateral view");
    s.drr.push_back(load_standardized_pgm(dir / rec.pa_path, View::PA));
    s.drr.push_back(load_standardized_pgm(dir / rec.lateral_path, View::Lateral));
    s.cxr.push_back(xray_standin(c, hu, rec, View::PA, s.drr[0]));
    s.cxr.push_back(xray_standin(c, hu, rec, View::Lateral, s.drr[1]));
    return s;
}

inline std::vector<Sample> load_split(const PipelineConfig& c, const std::vector<ManifestRecord>& records, Split split) {
    std::vector<Sample> out;
    for (const auto& r : records)
        if (r.split == split) out.push_back(load_sample(c, r));
    if (out.empty()) throw DomainError(std::string("dataset has no ") + to_string(split) + " samples");
    return out;
}

/// Repeat-and-concatenate condition: each view resized to the grid and repeated along its ray.
inline Volume rc_condition(const std::vector<const Projection*>& views, Dims3 dims, Spacing3 spacing) {
    Volume v(dims, spacing, 0.0, Domain::NormalizedPM1);
    const Projection pa = resize_bilinear(*views[0], dims.x, dims.z);
    std::optional<Projection> lat;
    if (views.size() > 1) lat = resize_bilinear(*views[1], dims.y, dims.z);
    for (std::size_t z = 0; z < dims.z; ++z)
        for (std::size_t y = 0; y < dims.y; ++y)
            for (std::size_t x = 0; x < dims.x; ++x) {
                double p = pa.at(x, z);
                if (lat) p = 0.5 * (p + lat->at(y, z));
                v.at(x, y, z) = std::clamp(2.0 * p - 1.0, -1.0, 1.0);
            }
    return v;
}

// ---------------------------------------------------------------------------
// Models and checkpoints

inline CoarseConfig coarse_config_for(const PipelineConfig& c) {
    CoarseConfig k;
    const double sp = c.fov_mm / double(c.h);
    k.dims = {c.w, c.h, c.d};
    k.spacing = {sp, sp, sp};
    k.r = c.r;
    k.encoder_channels = c.encoder_channels;
    k.fusion_channels = c.fusion_channels;
    k.base_channels = c.coarse_base_channels;
    k.channel_mults = c.unet_mults;
    k.bi_planar = c.bi_planar;
    k.T = c.bridge_T;
    k.s_max = c.bridge_s_max;
    return k;
}

inline FineConfig fine_config_for(const PipelineConfig& c) {
    FineConfig k;
    const double sp = c.fov_mm / double(c.h);
    k.dims = {c.w, c.h, c.d};
    k.spacing = {sp, sp, sp};
    k.base_channels = c.fine_base_channels;
    k.channel_mults = c.unet_mults;
    k.T = c.ddpm_T;
    k.beta_start = c.beta_start;
    k.beta_end = c.beta_end;
    return k;
}

inline SrConfig sr_config_for(const PipelineConfig& c) {
    SrConfig k;
    k.gamma = c.gamma;
    k.n_rrdb = c.sr_n_rrdb;
    k.base_features = c.sr_base_features;
    return k;
}

struct CheckpointNames {
    fs::path coarse, prior, fine, sr;
};

inline CheckpointNames checkpoint_names(const PipelineConfig& c) {
    const fs::path d = c.checkpoint_path();
    const std::string tag = c.variant_tag();
    return {d / ("coarse_" + tag + ".vnet"), d / "prior.vnet",
            d / ("fine_" + std::string(c.fine_condition == "rc" ? "rc_" : "") + tag + ".vnet"),
            d / (c.sr_use_synthetic ? "sr_syn_" + tag + ".vnet" : std::string("sr.vnet"))};
}

inline fs::path adam_path(const fs::path& ckpt) { return fs::path(ckpt).replace_extension(".adam.vnet"); }
inline fs::path loss_log_path(const fs::path& ckpt) { return fs::path(ckpt).replace_extension(".loss.jsonl"); }

inline void require_checkpoint(const std::string& stage, const fs::path& p) {
    if (!fs::exists(p)) throw MissingCheckpoint(stage, p);
}

inline CoarseModel make_coarse(const PipelineConfig& c) {
    SeededRng rng(derive_seed(c.seed, "coarse-init"), 0);
    return CoarseModel(coarse_config_for(c), rng);
}

inline FineModel make_fine_prior(const PipelineConfig& c) {
    SeededRng rng(derive_seed(c.seed, "prior-init"), 0);
    return FineModel(fine_config_for(c), rng);
}

inline FineModel make_fine(const PipelineConfig& c) {
    FineModel m = make_fine_prior(c);
    SeededRng rng(derive_seed(c.seed, "control-init"), 0);
    m.attach_control(rng);
    m.clamp_output = c.clamp_output;
    return m;
}

inline SrModel make_sr(const PipelineConfig& c) {
    SeededRng rng(derive_seed(c.seed, "sr-init"), 0);
    return SrModel(sr_config_for(c), rng);
}

inline CoarseModel load_coarse(const PipelineConfig& c) {
    const auto p = checkpoint_names(c).coarse;
    require_checkpoint("coarse", p);
    CoarseModel m = make_coarse(c);
    nn::load_module(m, p);
    return m;
}

inline FineModel load_fine(const PipelineConfig& c) {
    const auto p = checkpoint_names(c).fine;
    require_checkpoint("fine", p);
    FineModel m = make_fine(c);
    nn::load_module(m, p);
    return m;
}

inline SrModel load_sr(const PipelineConfig& c) {
    const auto p = checkpoint_names(c).sr;
    require_checkpoint("sr", p);
    SrModel m = make_sr(c);
    nn::load_module(m, p);
    return m;
}

// ---------------------------------------------------------------------------
// Sampling (per-sample noise streams keyed by id, so any subset reproduces)

inline Volume run_coarse(const PipelineConfig& c, const CoarseModel& m, const Sample& s, bool use_drr = false) {
    SeededRng rng(derive_seed(c.seed, use_drr ? "coarse-sample-drr" : "coarse-sample"), fnv1a64(s.record.id));
    return bridge_sample(m, s.views(c.bi_planar, use_drr), ddim_plan(c.bridge_T, c.coarse_ddim_steps, c.coarse_eta),
                         rng);
}

/// X^ for the fine stage: the coarse sample, or the repeat-and-concatenate lift.
inline Volume fine_condition(const PipelineConfig& c, const CoarseModel* coarse, const Sample& s, bool use_drr = false) {
    if (c.fine_condition == "rc") {
        const auto k = fine_config_for(c);
        return rc_condition(s.views(c.bi_planar, use_drr), k.dims, k.spacing);
    }
    return run_coarse(c, *coarse, s, use_drr);
}

inline Volume run_fine(const PipelineConfig& c, const FineModel& m, const Volume& cond, const std::string& id) {
    SeededRng rng(derive_seed(c.seed, "fine-sample"), fnv1a64(id));
    return fine_sample(m, &cond, ddim_plan(c.ddpm_T, c.fine_ddim_steps, c.fine_eta), rng);
}

// ---------------------------------------------------------------------------
// Training stages

struct StageLog {
    std::vector<EpochLoss> epochs;
};

inline std::string loss_line(const EpochLoss& e) {
    return nlohmann::json{{"epoch", e.epoch}, {"loss", e.mean_loss}}.dump() + "\n";
}

inline void append_text(const fs::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary | std::ios::app);
    if (!out) throw IoError(IoErrorKind::Open, "cannot open " + p.string());
    out << s;
    if (!out) throw IoError(IoErrorKind::Write, "failed writing " + p.string());
}

/// Runs `st.epochs` epochs of `loss_of` over `n` items, checkpointing model + optimizer
/// after every epoch. With `resume`, restarts after the last completed epoch.
template <class LossOf>
StageLog run_stage(const PipelineConfig& c, const std::string& stage, const nn::Module& model,
                   const nn::ParamList& trainable, const fs::path& ckpt, const StageTraining& st, bool resume,
                   std::size_t n, LossOf&& loss_of) {
    fs::create_directories(ckpt.parent_path());
    nn::Adam opt(trainable, {st.lr});
    std::size_t start = 0;
    const fs::path log_path = loss_log_path(ckpt), opt_path = adam_path(ckpt);
    if (resume && fs::exists(ckpt) && fs::exists(opt_path)) {
        nn::load_module(model, ckpt);
        auto state = nn::load_vnet(opt_path);
        double epoch = -1;
        nn::ParamList rest;
        for (auto& [name, t] : state)
            if (name == "epoch") epoch = t.item();
            else rest.emplace_back(name, t);
        if (epoch < 0) throw IoError(IoErrorKind::Format, "optimizer state lacks the epoch counter");
        opt.load_state(rest);
        start = std::size_t(epoch);
        // keep the first `start` log lines
        std::string kept;
        if (fs::exists(log_path)) {
            std::istringstream in(detail::read_file(log_path));
            std::string line;
            for (std::size_t i = 0; i < start && std::getline(in, line); ++i) kept += line + "\n";
        }
        detail::write_file(log_path, kept);
    } else {
        detail::write_file(log_path, "");
    }
    StageLog log;
    if (start >= st.epochs) return log;
    TrainOptions o{st.epochs - start, derive_seed(c.seed, stage + "-train"), start, st.batch};
    auto on_epoch = [&](const EpochLoss& e) {
        append_text(log_path, loss_line(e));
        nn::save_module(model, ckpt);
        auto state = opt.state();
        state.emplace_back("epoch", nn::Tensor::scalar(double(e.epoch)));
        nn::save_vnet(state, opt_path);
        log.epochs.push_back(e);
    };
    train_epochs(n, opt, o, loss_of, on_epoch);
    return log;
}

inline std::vector<ManifestRecord> training_records(const PipelineConfig& c) { return ensure_dataset(c); }

inline StageLog cmd_train_coarse(const PipelineConfig& c, bool resume = false) {
    const auto train = load_split(c, ensure_dataset(c), Split::Train);
    CoarseModel m = make_coarse(c);
    auto loss_of = [&](std::size_t i, SeededRng& rng) {
        const bool drr = c.use_drr_mix && rng.below(2) == 0;
        const int t = 1 + int(rng.below(std::uint64_t(m.schedule.T)));
        return coarse_loss(m, train[i].target_gen, train[i].views(c.bi_planar, drr), t, rng);
    };
    return run_stage(c, "coarse", m, m.parameters(), checkpoint_names(c).coarse, c.coarse, resume, train.size(),
                     loss_of);
}

inline StageLog cmd_train_prior(const PipelineConfig& c, bool resume = false) {
    const auto train = load_split(c, ensure_dataset(c), Split::Train);
    FineModel m = make_fine_prior(c);
    auto loss_of = [&](std::size_t i, SeededRng& rng) {
        return prior_loss(m, train[i].target_gen, sample_timestep(m.schedule, rng), rng);
    };
    return run_stage(c, "prior", m, m.parameters(), checkpoint_names(c).prior, c.prior, resume, train.size(),
                     loss_of);
}

inline StageLog cmd_train_fine(const PipelineConfig& c, bool resume = false) {
    const auto names = checkpoint_names(c);
    require_checkpoint("prior", names.prior);
    std::optional<CoarseModel> coarse;
    if (c.fine_condition == "coarse") coarse = load_coarse(c);
    const auto train = load_split(c, ensure_dataset(c), Split::Train);
    FineModel m = make_fine_prior(c);
    nn::load_module(m, names.prior);
    SeededRng rng(derive_seed(c.seed, "control-init"), 0);
    m.attach_control(rng);
    // conditions: X^ from the X-ray stand-ins, plus from the DRRs when mixing
    std::vector<Volume> cond_cxr, cond_drr;
    for (const auto& s : train) {
        cond_cxr.push_back(fine_condition(c, coarse ? &*coarse : nullptr, s, false));
        if (c.use_drr_mix) cond_drr.push_back(fine_condition(c, coarse ? &*coarse : nullptr, s, true));
    }
    auto loss_of = [&](std::size_t i, SeededRng& r) {
        const bool drr = c.use_drr_mix && r.below(2) == 0;
        return fine_loss(m, train[i].target_gen, drr ? cond_drr[i] : cond_cxr[i], sample_timestep(m.schedule, r), r);
    };
    return run_stage(c, "fine", m, m.control->parameters(), names.fine, c.fine, resume, train.size(), loss_of);
}

inline StageLog cmd_train_sr(const PipelineConfig& c, bool resume = false) {
    if (c.gamma < 2) throw ConfigError("gamma = 1: the SR stage is not used");
    const auto train = load_split(c, ensure_dataset(c), Split::Train);
    SrModel m = make_sr(c);
    std::vector<Volume> inputs;
    if (c.sr_use_synthetic) {
        std::optional<CoarseModel> coarse;
        if (c.fine_condition == "coarse") coarse = load_coarse(c);
        const FineModel fine = load_fine(c);
        for (const auto& s : train)
            inputs.push_back(run_fine(c, fine, fine_condition(c, coarse ? &*coarse : nullptr, s), s.record.id));
    } else {
        for (const auto& s : train) inputs.push_back(s.target_gen);
    }
    auto loss_of = [&](std::size_t i, SeededRng&) { return sr_loss(m, inputs[i], train[i].target); };
    return run_stage(c, "sr", m, m.parameters(), checkpoint_names(c).sr, c.sr, resume, train.size(), loss_of);
}

// ---------------------------------------------------------------------------
// Outputs

/// Orthogonal mid-slices, superior at the top: axial (x by y at z = D/2),
/// coronal (x by z at y = H/2), sagittal (y by z at x = W/2).
struct Slice2D {
    std::string name;
    std::size_t width = 0, height = 0;
    std::vector<double> data;
};

inline std::vector<Slice2D> mid_slices(const Volume& v) {
    const auto d = v.dims();
    const std::size_t mx = d.x / 2, my = d.y / 2, mz = d.z / 2;
    Slice2D ax{"axial", d.x, d.y, {}}, co{"coronal", d.x, d.z, {}}, sa{"sagittal", d.y, d.z, {}};
    for (std::size_t y = 0; y < d.y; ++y)
        for (std::size_t x = 0; x < d.x; ++x) ax.data.push_back(v.at(x, y, mz));
    for (std::size_t z = d.z; z-- > 0;)
        for (std::size_t x = 0; x < d.x; ++x) co.data.push_back(v.at(x, my, z));
    for (std::size_t z = d.z; z-- > 0;)
        for (std::size_t y = 0; y < d.y; ++y) sa.data.push_back(v.at(mx, y, z));
    return {ax, sa, co};
}

/// Records every written artifact with its size and FNV-1a hash.
class RunManifest {
public:
    explicit RunManifest(fs::path root) : root_(std::move(root)) {}

    void write(const fs::path& rel, const std::string& bytes) {
        const fs::path p = root_ / rel;
        fs::create_directories(p.parent_path());
        detail::write_file(p, bytes);
        add(rel, bytes);
    }
    void add(const fs::path& rel, const std::string& bytes) {
        char hex[17];
        std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(fnv1a64(bytes)));
        lines_ += nlohmann::json{{"path", rel.generic_string()}, {"bytes", bytes.size()}, {"fnv1a64", hex}}.dump() + "\n";
    }
    void finish(const fs::path& rel = "run_manifest.jsonl") { detail::write_file(root_ / rel, lines_); }
    const fs::path& root() const { return root_; }

private:
    fs::path root_;
    std::string lines_;
};

inline void write_volume(RunManifest& rm, const fs::path& rel, const Volume& v) { rm.write(rel, encode_vvol(v)); }

inline void write_slices(RunManifest& rm, const fs::path& dir, const std::string& id, const Volume& v) {
    for (const auto& s : mid_slices(v)) rm.write(dir / (id + "_" + s.name + ".pgm"), encode_pgm16(s.data, s.width, s.height));
}

inline Volume dataset_mean(const std::vector<Sample>& train) {
    Volume m(train.at(0).target.dims(), train[0].target.spacing(), 0.0, Domain::NormalizedPM1);
    for (const auto& s : train)
        for (std::size_t i = 0; i < m.data().size(); ++i) m[i] += s.target[i];
    for (auto& v : m.data()) v /= double(train.size());
    return m;
}

inline MetricReport evaluate(const std::vector<std::pair<std::string, Volume>>& preds, const std::vector<Volume>& targets) {
    std::vector<Volume> pu, tu;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        pu.push_back(to_unit_range(preds[i].second));
        tu.push_back(to_unit_range(targets[i]));
    }
    std::vector<EvalPair> pairs;
    for (std::size_t i = 0; i < preds.size(); ++i) pairs.push_back({preds[i].first, &pu[i], &tu[i]});
    return evaluate_batch(pairs);
}

/// Final-grid prediction of any stage output (trilinear when on the generation grid).
inline Volume to_target_grid(const PipelineConfig& c, const Volume& v) {
    if (v.dims() == Dims3{c.W, c.H, c.D}) return v;
    Volume out = rescale_to_grid(v, {c.W, c.H, c.D});
    out.set_domain(v.domain());
    return out;
}

struct PipelineResult {
    MetricReport report;          // final output vs Y
    MetricReport coarse_report;   // X^ vs Y (generation grid), empty when rc-conditioned
    MetricReport fine_report;     // Y^ vs Y (generation grid)
    MetricReport baseline_report; // dataset-mean predictor vs Y
};

/// Runs CoarseDiff -> FineDiff -> SR (iff gamma >= 2) on the test split and writes
/// volumes, reports, mid-slices and a run manifest into the output directory.
inline PipelineResult cmd_pipeline(const PipelineConfig& c, const fs::path& out_dir, bool coarse_only = false) {
    const auto names = checkpoint_names(c);
    std::optional<CoarseModel> coarse;
    if (coarse_only || c.fine_condition == "coarse") coarse = load_coarse(c);
    std::optional<FineModel> fine;
    std::optional<SrModel> sr;
    if (!coarse_only) {
        fine = load_fine(c);
        if (c.gamma >= 2) sr = load_sr(c);
    }
    const auto records = ensure_dataset(c);
    const auto test = load_split(c, records, Split::Test);
    const auto train = load_split(c, records, Split::Train);

    RunManifest rm(out_dir);
    fs::create_directories(out_dir);
    rm.write("config.toml", config_to_text(c));
    std::vector<std::pair<std::string, Volume>> finals, coarses, fines, means;
    std::vector<Volume> targets, targets_gen;
    const Volume mean = dataset_mean(train);
    for (const auto& s : test) {
        const std::string& id = s.record.id;
        Volume final_v;
        if (coarse_only) {
            Volume xh = run_coarse(c, *coarse, s);
            write_volume(rm, "volumes/" + id + "_coarse.vvol", xh);
            coarses.emplace_back(id, xh);
            final_v = to_target_grid(c, xh);
        } else {
            Volume cond = fine_condition(c, coarse ? &*coarse : nullptr, s);
            write_volume(rm, "volumes/" + id + (coarse ? "_coarse.vvol" : "_condition.vvol"), cond);
            if (coarse) coarses.emplace_back(id, cond);
            Volume y = run_fine(c, *fine, cond, id);
            write_volume(rm, "volumes/" + id + "_fine.vvol", y);
            fines.emplace_back(id, y);
            if (sr) {
                final_v = sr_forward(*sr, y);
                write_volume(rm, "volumes/" + id + "_sr.vvol", final_v);
            } else {
                final_v = y;
            }
        }
        write_slices(rm, "slices", id, final_v);
        finals.emplace_back(id, final_v);
        means.emplace_back(id, mean);
        targets.push_back(s.target);
        targets_gen.push_back(s.target_gen);
    }
    PipelineResult r;
    r.report = evaluate(finals, targets);
    r.baseline_report = evaluate(means, targets);
    rm.write("report.jsonl", report_to_jsonl(r.report));
    rm.write("report_mean_baseline.jsonl", report_to_jsonl(r.baseline_report));
    if (!coarses.empty()) {
        r.coarse_report = evaluate(coarses, targets_gen);
        rm.write("report_coarse.jsonl", report_to_jsonl(r.coarse_report));
    }
    if (!fines.empty()) {
        r.fine_report = evaluate(fines, targets_gen);
        rm.write("report_fine.jsonl", report_to_jsonl(r.fine_report));
    }
    rm.finish();
    return r;
}

inline PipelineResult cmd_pipeline(const PipelineConfig& c) { return cmd_pipeline(c, c.output_path()); }

inline const std::vector<std::string>& ablation_switches() {
    static const std::vector<std::string> s{"clamping", "bi-planar", "drr-mix", "coarse-only", "fine-only"};
    return s;
}

/// Evaluates the configuration with exactly one switch toggled.
inline MetricReport cmd_ablate(const PipelineConfig& c, const std::vector<std::string>& switches) {
    auto list = [] {
        std::string s;
        for (const auto& w : ablation_switches()) s += (s.empty() ? "" : ", ") + w;
        return s;
    };
    if (switches.size() != 1) throw ConfigError("ablate takes exactly one switch; valid: " + list());
    const std::string& sw = switches[0];
    PipelineConfig v = c;
    bool coarse_only = false;
    if (sw == "clamping") v.clamp_output = !c.clamp_output;
    else if (sw == "bi-planar") v.bi_planar = !c.bi_planar;
    else if (sw == "drr-mix") v.use_drr_mix = !c.use_drr_mix;
    else if (sw == "coarse-only") coarse_only = true;
    else if (sw == "fine-only") v.fine_condition = "rc";
    else throw ConfigError("unknown ablation switch '" + sw + "'; valid: " + list());
    return cmd_pipeline(v, c.output_path() / ("ablate-" + sw), coarse_only).report;
}

/// Coarse (and fine, SR) samples for the test split or one id, written under output_dir/samples.
inline std::vector<fs::path> cmd_sample(const PipelineConfig& c, const std::string& stage, bool with_sr,
                                        const std::string& only_id = {}) {
    if (stage != "coarse" && stage != "fine") throw ConfigError("--stage must be coarse or fine");
    if (with_sr && stage != "fine") throw ConfigError("--with-sr needs --stage fine");
    if (with_sr && c.gamma < 2) throw ConfigError("--with-sr needs gamma >= 2");
    std::optional<CoarseModel> coarse;
    if (stage == "coarse" || c.fine_condition == "coarse") coarse = load_coarse(c);
    std::optional<FineModel> fine;
    if (stage == "fine") fine = load_fine(c);
    std::optional<SrModel> sr;
    if (with_sr) sr = load_sr(c);
    const auto records = ensure_dataset(c);
    std::vector<fs::path> written;
    const fs::path dir = c.output_path() / "samples";
    fs::create_directories(dir);
    bool found = false;
    for (const auto& r : records) {
        if (only_id.empty() ? r.split != Split::Test : r.id != only_id) continue;
        found = true;
        const Sample s = load_sample(c, r);
        auto save = [&](const std::string& suffix, const Volume& v) {
            written.push_back(dir / (r.id + suffix));
            save_vvol(v, written.back());
        };
        if (stage == "coarse") {
            save("_coarse.vvol", run_coarse(c, *coarse, s));
            continue;
        }
        const Volume cond = fine_condition(c, coarse ? &*coarse : nullptr, s);
        const Volume y = run_fine(c, *fine, cond, r.id);
        save("_fine.vvol", y);
        if (sr) save("_sr.vvol", sr_forward(*sr, y));
    }
    if (!found) throw DomainError("no dataset sample with id '" + only_id + "'");
    return written;
}

} // namespace axon

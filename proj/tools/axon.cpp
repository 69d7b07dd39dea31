// axon: command-line front end for the phantom CT-from-radiograph pipeline.
#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "axon/pipeline.hpp"

namespace {

using namespace axon;
using nlohmann::json;

[[noreturn]] void fail(const std::string& kind, const std::string& message, json extra = json::object()) {
    extra["error"] = kind;
    extra["message"] = message;
    std::cerr << extra.dump() << "\n";
    std::exit(2);
}

PipelineConfig config_from(const std::string& path) {
    if (path.empty()) {
        PipelineConfig c;
        apply_env_overrides(c);
        c.validate();
        return c;
    }
    return load_config(path);
}

void print_losses(const StageLog& log) {
    for (const auto& e : log.epochs) std::cout << loss_line(e);
}

void print_report_summary(const MetricReport& r) {
    std::cout << json{{"psnr", detail::metric_value(r.psnr.mean)},
                      {"ssim", r.ssim.mean},
                      {"mae", r.mae.mean},
                      {"mse", r.mse.mean}}
                     .dump()
              << "\n";
}

View parse_view(const std::string& s) {
    if (s == "pa" || s == "PA") return View::PA;
    if (s == "lateral" || s == "LATERAL") return View::Lateral;
    throw ConfigError("view must be pa or lateral, got '" + s + "'");
}

/// Metrics operate on [0, 1]: PM1 volumes are mapped, HU volumes are refused.
Volume metric_domain(const Volume& v, const std::string& path) {
    switch (v.domain()) {
    case Domain::NormalizedPM1: return to_unit_range(v);
    case Domain::Normalized01: return v;
    default: throw DomainError(path + ": metrics need a normalized volume, got " + to_string(v.domain()));
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"axon: coarse-to-fine CT volume generation from radiographs (phantom scale)"};
    app.require_subcommand(1);

    std::string config_path;
    bool resume = false;

    auto* phantom = app.add_subcommand("phantom", "generate the phantom dataset (volumes, DRRs, manifest)");
    bool force = false;
    phantom->add_option("-c,--config", config_path, "config file");
    phantom->add_flag("--force", force, "regenerate even if a matching dataset exists");

    auto* drr = app.add_subcommand("drr", "render a DRR of an HU volume as a 16-bit PGM");
    std::string drr_in, drr_out, drr_view = "pa";
    std::size_t drr_px = 64;
    double drr_sid = 4.0, drr_noise = 0.0;
    std::uint64_t drr_seed = 0;
    bool drr_raw = false;
    drr->add_option("-i,--input", drr_in, "HU volume (.vvol)")->required();
    drr->add_option("-o,--output", drr_out, "output PGM")->required();
    drr->add_option("--view", drr_view, "pa | lateral");
    drr->add_option("--pixels", drr_px, "detector pixels per side");
    drr->add_option("--sid-factor", drr_sid, "source-detector distance / largest extent");
    drr->add_option("--noise", drr_noise, "additive Gaussian detector noise sigma");
    drr->add_option("--seed", drr_seed, "noise seed");
    drr->add_flag("--raw", drr_raw, "skip min-max standardization");

    auto* prep = app.add_subcommand("preprocess", "resample/window a volume, or standardize/register a projection");
    std::string prep_in, prep_out, prep_ref;
    std::size_t prep_grid = 0, prep_px = 0;
    double prep_spacing = 0;
    std::vector<double> prep_window;
    int prep_radius = 7;
    prep->add_option("-i,--input", prep_in, ".vvol volume or .pgm projection")->required();
    prep->add_option("-o,--output", prep_out, "output file")->required();
    prep->add_option("--grid", prep_grid, "resample to an n^3 grid (volumes)");
    prep->add_option("--spacing", prep_spacing, "resample to isotropic spacing in mm (volumes)");
    prep->add_option("--window", prep_window, "HU window lo hi, normalize to [-1, 1] (volumes)")->expected(2);
    prep->add_option("--pixels", prep_px, "standardized size (projections)");
    prep->add_option("--reference", prep_ref, "register the projection onto this PGM");
    prep->add_option("--radius", prep_radius, "registration search radius in pixels");

    std::vector<CLI::App*> trainers;
    for (const char* name : {"train-coarse", "train-prior", "train-fine", "train-sr"}) {
        auto* t = app.add_subcommand(name, std::string("train the ") + (name + 6) + " stage");
        t->add_option("-c,--config", config_path, "config file")->required();
        t->add_flag("--resume", resume, "continue after the last completed epoch");
        trainers.push_back(t);
    }

    auto* sample = app.add_subcommand("sample", "sample test volumes with trained checkpoints");
    std::string stage = "fine", only_id;
    bool with_sr = false;
    sample->add_option("-c,--config", config_path, "config file")->required();
    sample->add_option("--stage", stage, "coarse | fine");
    sample->add_flag("--with-sr", with_sr, "append the SR stage");
    sample->add_option("--id", only_id, "a single dataset id instead of the test split");

    auto* pipe = app.add_subcommand("pipeline", "full coarse -> fine -> SR inference and evaluation on the test split");
    std::string out_dir;
    pipe->add_option("-c,--config", config_path, "config file")->required();
    pipe->add_option("-o,--output", out_dir, "output directory (default: output_dir from the config)");

    auto* metrics = app.add_subcommand("metrics", "MAE/MSE/PSNR/SSIM of predictions against targets (JSON lines)");
    std::vector<std::string> preds, targets;
    std::string metrics_out;
    metrics->add_option("-p,--pred", preds, "prediction volumes")->required();
    metrics->add_option("-t,--target", targets, "target volumes, same order")->required();
    metrics->add_option("-o,--output", metrics_out, "write the report here instead of stdout");

    auto* ablate = app.add_subcommand("ablate", "evaluate with one design switch toggled");
    std::vector<std::string> switches;
    ablate->add_option("-c,--config", config_path, "config file")->required();
    ablate->add_option("-s,--switch", switches, "clamping | bi-planar | drr-mix | coarse-only | fine-only")->required();

    auto* slices = app.add_subcommand("slices", "axial/sagittal/coronal mid-slices of a volume as PGMs");
    std::string sl_in, sl_dir = ".";
    slices->add_option("-i,--input", sl_in, "volume (.vvol)")->required();
    slices->add_option("-o,--output-dir", sl_dir, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        fail("usage", e.what());
    }

    try {
        if (*phantom) {
            const PipelineConfig c = config_from(config_path);
            const auto recs = ensure_dataset(c, force);
            std::size_t n[3] = {0, 0, 0};
            for (const auto& r : recs) ++n[int(r.split)];
            std::cout << json{{"dataset", c.dataset_path().string()},
                              {"train", n[0]}, {"val", n[1]}, {"test", n[2]}}
                             .dump()
                      << "\n";
        } else if (*drr) {
            const Volume hu = load_vvol(drr_in);
            if (hu.domain() != Domain::HU) throw DomainError("drr: input must be an HU volume");
            const auto geo = dataset_geometry(hu, {drr_sid, drr_px, true});
            const auto& cam = parse_view(drr_view) == View::PA ? geo.pa : geo.lateral;
            std::optional<DetectorNoise> noise;
            if (drr_noise > 0) noise = DetectorNoise{drr_noise, SeededRng(drr_seed, 0)};
            Projection p = render_drr(hu_to_attenuation(hu), cam, noise);
            if (!drr_raw) p = standardize_projection(p, drr_px, drr_px);
            save_pgm16(p, drr_out);
        } else if (*prep) {
            if (fs::path(prep_in).extension() == ".pgm") {
                Projection p = load_standardized_pgm(prep_in, View::PA);
                if (prep_px) p = standardize_projection(p, prep_px, prep_px);
                json info = json::object();
                if (!prep_ref.empty()) {
                    const Projection ref = load_standardized_pgm(prep_ref, View::PA);
                    const RigidShift2D s = register_to_reference(p, ref, prep_radius);
                    p = apply_shift(p, s);
                    info = {{"dx", s.dx}, {"dy", s.dy}, {"ncc", s.score}};
                }
                save_pgm16(p, prep_out);
                if (!info.empty()) std::cout << info.dump() << "\n";
            } else {
                Volume v = load_vvol(prep_in);
                if (prep_grid && prep_spacing > 0) throw ConfigError("give --grid or --spacing, not both");
                if (prep_spacing > 0) v = resample_volume(v, {prep_spacing, prep_spacing, prep_spacing});
                if (prep_grid) v = rescale_to_grid(v, {prep_grid, prep_grid, prep_grid});
                if (!prep_window.empty())
                    v = window_and_normalize(v, {prep_window[0], prep_window[1]}, NormTarget::PM1);
                save_vvol(v, prep_out);
            }
        } else if (*trainers[0]) {
            print_losses(cmd_train_coarse(config_from(config_path), resume));
        } else if (*trainers[1]) {
            print_losses(cmd_train_prior(config_from(config_path), resume));
        } else if (*trainers[2]) {
            print_losses(cmd_train_fine(config_from(config_path), resume));
        } else if (*trainers[3]) {
            print_losses(cmd_train_sr(config_from(config_path), resume));
        } else if (*sample) {
            for (const auto& p : cmd_sample(config_from(config_path), stage, with_sr, only_id))
                std::cout << p.string() << "\n";
        } else if (*pipe) {
            const PipelineConfig c = config_from(config_path);
            const auto r = cmd_pipeline(c, out_dir.empty() ? c.output_path() : fs::path(out_dir));
            print_report_summary(r.report);
        } else if (*metrics) {
            if (preds.size() != targets.size()) throw ConfigError("--pred and --target counts differ");
            std::vector<Volume> p, t;
            for (std::size_t i = 0; i < preds.size(); ++i) {
                p.push_back(metric_domain(load_vvol(preds[i]), preds[i]));
                t.push_back(metric_domain(load_vvol(targets[i]), targets[i]));
            }
            std::vector<EvalPair> pairs;
            for (std::size_t i = 0; i < p.size(); ++i)
                pairs.push_back({fs::path(preds[i]).stem().string(), &p[i], &t[i]});
            const std::string text = report_to_jsonl(evaluate_batch(pairs));
            if (metrics_out.empty()) std::cout << text;
            else detail::write_file(metrics_out, text);
        } else if (*ablate) {
            print_report_summary(cmd_ablate(config_from(config_path), switches));
        } else if (*slices) {
            const Volume v = load_vvol(sl_in);
            fs::create_directories(sl_dir);
            const std::string stem = fs::path(sl_in).stem().string();
            for (const auto& s : mid_slices(v))
                detail::write_file(fs::path(sl_dir) / (stem + "_" + s.name + ".pgm"),
                                   encode_pgm16(s.data, s.width, s.height));
        }
    } catch (const MissingCheckpoint& e) {
        fail("missing-checkpoint", e.what(), {{"stage", e.stage()}});
    } catch (const ConfigError& e) {
        fail("config", e.what());
    } catch (const IoError& e) {
        fail(std::string("io-") + to_string(e.kind()), e.what());
    } catch (const ShapeError& e) {
        fail("shape", e.what());
    } catch (const DomainError& e) {
        fail("domain", e.what());
    } catch (const std::exception& e) {
        fail("internal", e.what());
    }
    return 0;
}

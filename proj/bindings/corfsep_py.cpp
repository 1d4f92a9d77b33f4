// Python surface over the toolkit: metrics, audio files, mixture
// simulation, checkpoint loading and the recursive separation pipeline.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "corfsep/audio.hpp"
#include "corfsep/checkpoint.hpp"
#include "corfsep/metrics.hpp"
#include "corfsep/mixsim.hpp"
#include "corfsep/pipeline.hpp"

namespace py = pybind11;
using namespace corfsep;

namespace {

py::dict to_dict(const pipeline::SeparationResult& r) {
  py::list sources, cues, decisions;
  for (const auto& s : r.fine_sources) sources.append(s.samples);
  for (const auto& c : r.coarse_cues) cues.append(c.samples);
  for (const auto& [cont, conf] : r.stop_decisions) decisions.append(py::make_tuple(cont, conf));
  py::dict d;
  d["sources"] = sources;
  d["cues"] = cues;
  d["decisions"] = decisions;
  d["iterations"] = r.iterations;
  d["truncated"] = r.truncated;
  return d;
}

py::dict to_dict(const pipeline::EvalReport& rep) {
  py::dict per_n, per_iter;
  for (const auto& [n, v] : rep.per_num_speakers) per_n[py::int_(n)] = v;
  for (const auto& [n, by_j] : rep.per_iteration) {
    py::dict inner;
    for (const auto& [j, v] : by_j) inner[py::int_(j)] = v;
    per_iter[py::int_(n)] = inner;
  }
  py::dict d;
  d["counting_accuracy"] = rep.counting_accuracy;
  d["num_mixtures"] = rep.num_mixtures;
  d["per_num_speakers"] = per_n;
  d["per_iteration"] = per_iter;
  d["records"] = pipeline::format_records(rep);
  d["summary"] = pipeline::format_summary(rep);
  return d;
}

}  // namespace

PYBIND11_MODULE(_corfsep, m) {
  m.doc() = "Recursive speech separation for unknown speaker counts";
  m.attr("__version__") = "0.1.0";
  m.attr("PIPELINE_RATE") = audio::kPipelineRate;

  m.def("si_snr", [](const std::vector<double>& est, const std::vector<double>& ref) {
    return metrics::si_snr(est, ref);
  }, py::arg("est"), py::arg("ref"),
     "Scale-invariant SNR in dB of an estimate against a reference.");

  m.def("si_snr_improvement",
        [](const std::vector<double>& est, const std::vector<double>& ref,
           const std::vector<double>& mix) { return metrics::si_snr_improvement(est, ref, mix); },
        py::arg("est"), py::arg("ref"), py::arg("mix"),
        "SI-SNR gain of the estimate over the unprocessed mixture.");

  m.def("best_permutation",
        [](const std::vector<std::vector<double>>& ests, const std::vector<std::vector<double>>& refs) {
          const auto rep = metrics::best_permutation_alignment(ests, refs);
          return py::make_tuple(rep.permutation, rep.mean_si_snr_db);
        },
        py::arg("ests"), py::arg("refs"),
        "Estimate-to-reference bijection maximizing mean SI-SNR; returns (permutation, mean_db).");

  m.def("read_wav", [](const std::string& path) {
    const auto w = audio::read_wav(path);
    return py::make_tuple(w.samples, w.rate);
  }, py::arg("path"), "Mono 16-bit PCM in; returns (samples, rate).");

  m.def("write_wav",
        [](const std::string& path, const std::vector<double>& samples, int rate) {
          audio::write_wav(path, audio::Waveform{samples, rate});
        },
        py::arg("path"), py::arg("samples"), py::arg("rate") = audio::kPipelineRate);

  m.def("simulate",
        [](const std::string& corpus, const std::string& out_dir, int n_speakers, int count,
           double snr_lo_db, double snr_hi_db, uint64_t seed) {
          const auto index = mixsim::ingest_corpus(corpus);
          mixsim::BuildOptions opt;
          opt.n_speakers = n_speakers;
          opt.count = count;
          opt.snr_lo_db = snr_lo_db;
          opt.snr_hi_db = snr_hi_db;
          opt.seed = seed;
          const auto entries = mixsim::build_dataset(index, out_dir, opt);
          std::vector<std::string> paths;
          for (const auto& e : entries) paths.push_back(e.mixture_path);
          return paths;
        },
        py::arg("corpus"), py::arg("out_dir"), py::arg("n_speakers") = 2, py::arg("count") = 20,
        py::arg("snr_lo_db") = 0.0, py::arg("snr_hi_db") = 5.0, py::arg("seed") = 0,
        "Build a mixture dataset from a clean corpus; returns the mixture paths.");

  py::class_<pipeline::Models>(m, "Models", "The three checkpoints of one separation system.");

  m.def("load_models", &pipeline::load_models, py::arg("stage1"), py::arg("stop"),
        py::arg("stage2"),
        "Load and cross-check the stage-1, stop-classifier and stage-2 checkpoints.");

  m.def("separate",
        [](const pipeline::Models& models, const std::vector<double>& samples, int rate,
           int max_iterations, bool terminal_residual_as_cue) {
          pipeline::SeparateOptions opt;
          opt.max_iterations = max_iterations;
          opt.terminal_residual_as_cue = terminal_residual_as_cue;
          return to_dict(pipeline::separate(audio::Waveform{samples, rate}, models, opt));
        },
        py::arg("models"), py::arg("samples"), py::arg("rate") = audio::kPipelineRate,
        py::arg("max_iterations") = 10, py::arg("terminal_residual_as_cue") = true,
        "Recursively separate a mixture; returns sources, cues and stop decisions.");

  m.def("evaluate",
        [](const std::string& manifest, const pipeline::Models& models, int max_iterations,
           bool score_coarse, int workers) {
          pipeline::EvalOptions opt;
          opt.separate.max_iterations = max_iterations;
          opt.score_coarse = score_coarse;
          opt.workers = workers;
          return to_dict(pipeline::evaluate(manifest, models, opt));
        },
        py::arg("manifest"), py::arg("models"), py::arg("max_iterations") = 10,
        py::arg("score_coarse") = false, py::arg("workers") = 1,
        "Score a reference manifest; returns accuracy, per-group means and the report texts.");
}

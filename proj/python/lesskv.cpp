#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "less/cli.hpp"
#include "less/evaluation.hpp"
#include "less/trainer.hpp"

namespace py = pybind11;
using namespace less;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Mat to_mat(const Array& a) {
  if (a.ndim() != 2) throw std::invalid_argument("expected a 2-D array");
  const auto r = static_cast<std::size_t>(a.shape(0)), c = static_cast<std::size_t>(a.shape(1));
  return Mat(r, c, std::vector<double>(a.data(), a.data() + r * c));
}

py::array_t<double> to_array(const Mat& m) {
  py::array_t<double> out({m.rows(), m.cols()});
  std::copy(m.data().begin(), m.data().end(), out.mutable_data());
  return out;
}

std::vector<std::uint8_t> to_bytes(const py::bytes& b) {
  const std::string s = b;
  return {s.begin(), s.end()};
}

CacheBackend make_backend(const std::string& kind, Policy policy, std::size_t budget, const KernelBank* kernels) {
  if (kind == "full") return CacheBackend::full();
  if (kind == "sparse" || kind == "baseline") return CacheBackend::sparse(policy, budget);
  if (kind == "less") {
    if (!kernels) throw std::invalid_argument("the less backend needs kernels");
    return CacheBackend::less(policy, budget, *kernels);
  }
  throw std::invalid_argument("unknown backend: " + kind);
}

py::dict perplexity_dict(const Perplexity& p) {
  py::dict d;
  d["word_ppl"] = p.word_ppl;
  d["byte_ppl"] = p.byte_ppl;
  d["total_nll"] = p.total_nll;
  d["bytes"] = p.bytes;
  d["words"] = p.words;
  return d;
}

}  // namespace

PYBIND11_MODULE(lesskv, m) {
  m.doc() = "Sparse-plus-low-rank KV cache toolkit on a byte-level toy model";

  py::enum_<Policy>(m, "Policy")
      .value("H2O", Policy::H2O)
      .value("LAMBDA", Policy::Lambda)
      .value("TOVA", Policy::TOVA);
  m.def("parse_policy", [](const std::string& s) { return parse_policy(s); });
  m.def("budget_tokens", &budget_tokens, py::arg("max_len"), py::arg("pct"));
  m.def("build_lm_mask", [](Policy p, std::size_t budget, const Array& scores) {
    return to_array(build_lm_mask(p, budget, to_mat(scores)));
  });
  m.def("hellinger", [](const std::vector<double>& p, const std::vector<double>& q) { return hellinger(p, q); });

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("vocab", &ModelConfig::vocab)
      .def_readwrite("d_model", &ModelConfig::d_model)
      .def_readwrite("n_heads", &ModelConfig::n_heads)
      .def_readwrite("n_layers", &ModelConfig::n_layers)
      .def_readwrite("context_len", &ModelConfig::context_len)
      .def_readwrite("seed", &ModelConfig::seed)
      .def_property_readonly("head_dim", &ModelConfig::head_dim);

  py::class_<ToyModel>(m, "ToyModel")
      .def_static("init", &ToyModel::init)
      .def_static("load", [](const std::filesystem::path& p) { return read_model(p); })
      .def("save", [](const ToyModel& self, const std::filesystem::path& p) { write_model(p, self); })
      .def_readonly("config", &ToyModel::config)
      .def("parameter_count", &ToyModel::parameter_count)
      .def("logits", [](const ToyModel& self, const py::bytes& tokens) {
        const auto t = to_bytes(tokens);
        return to_array(forward_full(self, t).logits);
      })
      .def("attention_inputs", [](const ToyModel& self, const py::bytes& tokens, std::size_t layer, std::size_t head) {
        const auto t = to_bytes(tokens);
        const auto fw = forward_full(self, t);
        const auto& r = fw.layers.at(layer);
        return py::make_tuple(to_array(r.q.at(head)), to_array(r.k.at(head)), to_array(r.v.at(head)));
      });

  m.def(
      "pretrain",
      [](const ModelConfig& cfg, const py::bytes& corpus, std::size_t steps, double lr, std::size_t batch,
         std::size_t warmup) {
        PretrainOptions o;
        o.steps = steps;
        o.lr = lr;
        o.batch = batch;
        o.warmup = warmup;
        const auto c = to_bytes(corpus);
        PretrainResult res;
        {
          py::gil_scoped_release nogil;
          res = pretrain(cfg, c, o);
        }
        return py::make_tuple(res.model, res.heldout_loss);
      },
      py::arg("config"), py::arg("corpus"), py::arg("steps") = 2000, py::arg("lr") = 3e-3, py::arg("batch") = 2,
      py::arg("warmup") = 100);

  py::class_<KernelParams>(m, "KernelParams")
      .def_static("init", [](std::size_t d, std::size_t hidden, std::size_t rank, std::uint64_t seed) {
        Rng rng(seed);
        return KernelParams::init(d, hidden, rank, rng);
      })
      .def_static("zeros", &KernelParams::zeros)
      .def_readwrite("psi_s1", &KernelParams::psi_s1)
      .def_readwrite("psi_s2", &KernelParams::psi_s2)
      .def_readwrite("psi_s3", &KernelParams::psi_s3)
      .def_property_readonly("rank", &KernelParams::rank)
      .def_property_readonly("head_dim", &KernelParams::head_dim)
      .def("phi", [](const KernelParams& p, const Array& q) { return to_array(phi(p, to_mat(q))); })
      .def("psi", [](const KernelParams& p, const Array& k) { return to_array(psi(p, to_mat(k))); });

  py::class_<KernelBank>(m, "KernelBank")
      .def_static("load", &KernelBank::load)
      .def_static("zeros", &KernelBank::zeros)
      .def("save", &KernelBank::save)
      .def_property_readonly("n_layers", &KernelBank::n_layers)
      .def_property_readonly("n_heads", &KernelBank::n_heads)
      .def("params", [](const KernelBank& b, std::size_t l, std::size_t h) {
        const auto* kp = std::get_if<KernelParams>(&b.at(l, h));
        if (!kp) throw std::invalid_argument("head does not hold learned kernels");
        return *kp;
      });

  m.def(
      "masked_attention",
      [](const KernelParams& p, const Array& q, const Array& k, const Array& v, const Array& mask) {
        const auto r = masked_attention(FeatureMap(p), to_mat(q), to_mat(k), to_mat(v), to_mat(mask));
        return py::make_tuple(to_array(r.output), to_array(r.probs));
      },
      "LESS attention for a whole sequence; returns (output, probabilities)");
  m.def("sparse_attention", [](const Array& q, const Array& k, const Array& v, const Array& mask) {
    const auto r = sparse_attention(to_mat(q), to_mat(k), to_mat(v), to_mat(mask));
    return py::make_tuple(to_array(r.output), to_array(r.probs));
  });

  m.def(
      "train_kernels",
      [](const ToyModel& model, const py::bytes& corpus, std::size_t n_seqs, std::size_t epochs, double beta,
         Policy policy, std::uint64_t seed, std::size_t hidden, std::size_t rank) {
        const auto c = to_bytes(corpus);
        py::gil_scoped_release nogil;  // returns a C++ object; conversion happens after reacquiring
        const auto tr = collect_traces(model, c, n_seqs, model.config.context_len, seed);
        TrainConfig cfg;
        cfg.epochs = epochs;
        cfg.halve_every = std::max<std::size_t>(1, epochs / 4);
        cfg.beta = beta;
        cfg.policy = policy;
        cfg.seed = seed;
        cfg.hidden = hidden;
        cfg.rank = rank;
        std::vector<std::size_t> layers(model.config.n_layers);
        for (std::size_t l = 0; l < layers.size(); ++l) layers[l] = l;
        return bank_from_results(train_all(tr, layers, cfg, 1), model.config.n_layers, model.config.n_heads);
      },
      py::arg("model"), py::arg("corpus"), py::arg("n_seqs") = 32, py::arg("epochs") = 40, py::arg("beta") = 0.1,
      py::arg("policy") = Policy::H2O, py::arg("seed") = 0, py::arg("hidden") = 64, py::arg("rank") = 8);

  m.def(
      "perplexity",
      [](const ToyModel& model, const py::bytes& corpus, const std::string& backend, Policy policy,
         std::size_t budget, const KernelBank* kernels, std::size_t max_windows) {
        const auto c = to_bytes(corpus);
        const auto b = make_backend(backend, policy, budget, kernels);
        Perplexity p;
        {
          py::gil_scoped_release nogil;
          p = perplexity(model, c, b, max_windows);
        }
        return perplexity_dict(p);
      },
      py::arg("model"), py::arg("corpus"), py::arg("backend") = "full", py::arg("policy") = Policy::H2O,
      py::arg("budget") = 0, py::arg("kernels") = nullptr, py::arg("max_windows") = 0);

  m.def(
      "generate",
      [](const ToyModel& model, const py::bytes& prompt, std::size_t gen_len, const std::string& backend,
         Policy policy, std::size_t budget, const KernelBank* kernels) {
        const auto p = to_bytes(prompt);
        const auto r = decode(model, p, gen_len, make_backend(backend, policy, budget, kernels));
        return py::bytes(reinterpret_cast<const char*>(r.generated.data()), r.generated.size());
      },
      py::arg("model"), py::arg("prompt"), py::arg("gen_len"), py::arg("backend") = "full",
      py::arg("policy") = Policy::H2O, py::arg("budget") = 0, py::arg("kernels") = nullptr);

  m.def(
      "compare_methods",
      [](const ToyModel& model, const KernelBank& kernels, Policy policy, std::size_t budget, const py::bytes& corpus,
         std::size_t max_windows) {
        const auto c = to_bytes(corpus);
        EvalOptions o;
        o.max_windows = max_windows;
        EvalReport r;
        {
          py::gil_scoped_release nogil;
          r = compare_methods(model, kernels, policy, budget, c, o);
        }
        py::dict out;
        for (const auto& mr : r.methods) {
          py::dict d = perplexity_dict(mr.ppl);
          d["budget"] = mr.budget;
          d["floats_per_head"] = mr.floats_per_head;
          out[py::str(mr.method)] = d;
        }
        out["hellinger_sparse"] = r.hellinger.sparse;
        out["hellinger_less"] = r.hellinger.less;
        return out;
      },
      py::arg("model"), py::arg("kernels"), py::arg("policy"), py::arg("budget"), py::arg("corpus"),
      py::arg("max_windows") = 0);

  m.def(
      "residual_svd_report",
      [](const ToyModel& model, const py::bytes& corpus, std::size_t k, std::size_t max_windows) {
        const auto c = to_bytes(corpus);
        py::list out;
        for (const auto& cv : residual_svd_report(model, c, k, max_windows)) {
          py::dict d;
          d["layer"] = cv.layer;
          d["head"] = cv.head;
          d["a_rel"] = cv.a_rel;
          d["delta_rel"] = cv.delta_rel;
          out.append(d);
        }
        return out;
      },
      py::arg("model"), py::arg("corpus"), py::arg("k"), py::arg("max_windows") = 1);

  m.def(
      "cli",
      [](const std::vector<std::string>& args) {
        std::vector<const char*> argv{"less"};
        for (const auto& a : args) argv.push_back(a.c_str());
        return cli::run(static_cast<int>(argv.size()), argv.data());
      },
      "Runs the command-line tool in-process and returns its exit code");
}

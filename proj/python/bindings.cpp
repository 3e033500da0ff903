#include <pybind11/numpy.h>
#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "dgl/experiment.hpp"
#include "dgl/replay_buffer.hpp"
#include "dgl/vq_codec.hpp"

namespace py = pybind11;

namespace {

using Array = py::array_t<float, py::array::c_style | py::array::forcecast>;

dgl::Tensor<float> to_tensor(const Array& a) {
  if (a.ndim() != 4) throw std::invalid_argument("expected a 4-D array (batch, channels, height, width)");
  const dgl::Shape s{static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
                     static_cast<std::size_t>(a.shape(2)), static_cast<std::size_t>(a.shape(3))};
  return dgl::Tensor<float>(s, std::vector<float>(a.data(), a.data() + a.size()));
}

Array to_array(const dgl::Tensor<float>& t) {
  const auto& s = t.shape();
  Array out({s.batch, s.channels, s.height, s.width});
  std::copy(t.data(), t.data() + t.size(), out.mutable_data());
  return out;
}

py::bytes to_bytes(const std::vector<std::uint8_t>& v) {
  return py::bytes(reinterpret_cast<const char*>(v.data()), v.size());
}

std::vector<std::uint8_t> from_bytes(const py::bytes& b) {
  const std::string s = b;
  return {s.begin(), s.end()};
}

// Python-side replay buffer holding arbitrary objects.
using ObjectBuffer = dgl::ReplayBuffer<py::object>;

}  // namespace

PYBIND11_MODULE(_dgl, m) {
  m.doc() = "Decoupled greedy learning: compression accounting, codecs, scheduling and experiment runs";

  py::register_exception<dgl::ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<dgl::CodecError>(m, "CodecError", PyExc_ValueError);

  m.def("bits_per_index", &dgl::bits_per_index, py::arg("atoms"));
  m.def("batch_bits", &dgl::batch_bits, py::arg("B"), py::arg("N"), py::arg("K_prev"), py::arg("K"), py::arg("C"),
        py::arg("k"), py::arg("alpha"));
  m.def("bandwidth_compression", &dgl::bandwidth_compression, py::arg("B"), py::arg("N"), py::arg("K_prev"),
        py::arg("K"), py::arg("C"), py::arg("k"), py::arg("alpha"));
  m.def("buffer_bits", &dgl::buffer_bits, py::arg("M"), py::arg("N"), py::arg("K"), py::arg("C"), py::arg("k"));
  m.def("buffer_compression", &dgl::buffer_compression, py::arg("M"), py::arg("N"), py::arg("K"), py::arg("C"),
        py::arg("k"));

  m.def(
      "compress_report",
      [](std::size_t width, std::size_t modules, std::uint64_t batch, std::uint64_t groups, double alpha,
         const std::vector<std::uint64_t>& atoms, const std::vector<std::uint64_t>& samples) {
        const auto net = dgl::build_reference_net(width, modules, 10);
        py::list rows;
        for (const auto& r : dgl::compress_report(net, batch, groups, alpha, atoms, samples)) {
          py::dict d;
          d["module"] = r.module;
          d["N"] = r.N;
          d["K"] = r.K;
          d["K_prev"] = r.K_prev;
          d["C"] = r.C;
          d["M"] = r.M;
          d["k"] = r.k;
          d["batch_bits"] = r.batch_bits;
          d["bandwidth_compression"] = r.bandwidth;
          d["buffer_bits"] = r.buffer_bits;
          d["buffer_compression"] = r.buffer;
          rows.append(d);
        }
        return rows;
      },
      py::arg("width") = 128, py::arg("modules") = 4, py::arg("batch") = 128, py::arg("groups") = 32,
      py::arg("alpha") = 1.0, py::arg("atoms") = std::vector<std::uint64_t>{256},
      py::arg("samples") = std::vector<std::uint64_t>{256});

  m.def(
      "pmf_from_slowdown",
      [](std::size_t modules, std::size_t slow_module, double slowdown) {
        return dgl::pmf_from_slowdown(modules, slow_module, slowdown).pmf;
      },
      py::arg("modules"), py::arg("slow_module"), py::arg("slowdown"), "slow_module is 0-based");
  m.def(
      "slowdown_from_pmf", [](const std::vector<double>& pmf, std::size_t module) {
        return dgl::slowdown_from_pmf(pmf, module);
      },
      py::arg("pmf"), py::arg("module"));

  py::class_<dgl::Codebook>(m, "Codebook")
      .def(py::init<std::size_t, std::size_t, std::size_t>(), py::arg("channels"), py::arg("groups"),
           py::arg("atoms"))
      .def_property_readonly("channels", &dgl::Codebook::channels)
      .def_property_readonly("groups", &dgl::Codebook::groups)
      .def_property_readonly("atoms", &dgl::Codebook::atoms)
      .def_property_readonly("dims", &dgl::Codebook::dims)
      .def_property_readonly("version", &dgl::Codebook::version)
      .def(
          "seed_from",
          [](dgl::Codebook& cb, const Array& x, std::uint64_t seed) {
            dgl::Rng rng(seed);
            cb.seed_from(to_tensor(x), rng);
          },
          py::arg("x"), py::arg("seed") = 0)
      .def(
          "atom", [](const dgl::Codebook& cb, std::size_t g, std::size_t i) {
            const auto a = cb.atom(g, i);
            return std::vector<float>(a.begin(), a.end());
          },
          py::arg("group"), py::arg("index"))
      .def(
          "set_atom",
          [](dgl::Codebook& cb, std::size_t g, std::size_t i, const std::vector<float>& v) {
            auto a = cb.atom(g, i);
            if (v.size() != a.size()) throw std::invalid_argument("atom dimension mismatch");
            std::copy(v.begin(), v.end(), a.begin());
            cb.mark_initialized();
          },
          py::arg("group"), py::arg("index"), py::arg("values"))
      .def("to_bytes", [](const dgl::Codebook& cb) { return to_bytes(dgl::serialize(cb)); })
      .def_static("from_bytes", [](const py::bytes& b) { return dgl::deserialize_codebook(from_bytes(b)); });

  py::class_<dgl::QuantizedBatch>(m, "QuantizedBatch")
      .def_readonly("batch", &dgl::QuantizedBatch::batch)
      .def_readonly("extent", &dgl::QuantizedBatch::extent)
      .def_readonly("atoms", &dgl::QuantizedBatch::atoms)
      .def_readonly("dims", &dgl::QuantizedBatch::dims)
      .def_readonly("indices", &dgl::QuantizedBatch::indices)
      .def_readwrite("labels", &dgl::QuantizedBatch::labels)
      .def("index_bits", [](const dgl::QuantizedBatch& q) { return dgl::index_bits(q); })
      .def("to_bytes", [](const dgl::QuantizedBatch& q) { return to_bytes(dgl::serialize(q)); })
      .def_static("from_bytes", [](const py::bytes& b) { return dgl::deserialize_quantized(from_bytes(b)); })
      .def(py::self == py::self);

  m.def("encode", [](const Array& x, const dgl::Codebook& cb) { return dgl::encode(to_tensor(x), cb); },
        py::arg("x"), py::arg("codebook"));
  m.def("decode", [](const dgl::QuantizedBatch& q, const dgl::Codebook& cb) { return to_array(dgl::decode<float>(q, cb)); },
        py::arg("q"), py::arg("codebook"));
  m.def(
      "ema_update",
      [](dgl::Codebook& cb, const Array& x, double decay, double epsilon, std::uint64_t dead_after,
         std::uint64_t seed) {
        dgl::Rng rng(seed);
        return dgl::ema_update(cb, to_tensor(x), dgl::VqOptions{decay, epsilon, dead_after}, rng);
      },
      py::arg("codebook"), py::arg("x"), py::arg("decay") = 0.99, py::arg("epsilon") = 1e-5,
      py::arg("dead_after") = 1024, py::arg("seed") = 0);

  py::class_<ObjectBuffer>(m, "ReplayBuffer")
      .def(py::init<std::size_t>(), py::arg("capacity"))
      .def("push", &ObjectBuffer::push, py::arg("payload"), py::arg("labels") = std::vector<int>{})
      .def("sample",
           [](ObjectBuffer& b) -> py::object {
             auto e = b.sample();
             if (!e) return py::none();
             return py::make_tuple(e->payload, e->labels, e->reuse_count, e->seq);
           },
           "(payload, labels, reuse_count, seq), or None when the buffer is empty")
      .def("__len__", &ObjectBuffer::size)
      .def_property_readonly("capacity", &ObjectBuffer::capacity);

  m.def(
      "estimate_drift",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> a,
         py::array_t<double, py::array::c_style | py::array::forcecast> b, std::size_t projections,
         std::size_t bins, std::uint64_t seed) {
        if (a.ndim() != 2 || b.ndim() != 2 || a.shape(1) != b.shape(1))
          throw std::invalid_argument("expected two 2-D arrays with the same number of columns");
        dgl::DriftOptions opt;
        opt.projections = projections;
        opt.bins = bins;
        opt.seed = seed;
        const auto r = dgl::estimate_drift(std::span<const double>(a.data(), a.size()),
                                           std::span<const double>(b.data(), b.size()),
                                           static_cast<std::size_t>(a.shape(1)), opt);
        return py::make_tuple(r.value, r.small_sample);
      },
      py::arg("a"), py::arg("b"), py::arg("projections") = 8, py::arg("bins") = 32, py::arg("seed") = 0);

  m.def("parse_config", [](const std::string& text) { return dgl::serialize_config(dgl::parse_config(text)); },
        py::arg("text"), "Validates a config and returns its canonical text");
  m.def(
      "run",
      [](const std::string& text, std::optional<std::uint64_t> seed, const std::string& out) {
        auto config = dgl::parse_config(text);
        if (seed) config.seed = *seed;
        dgl::RunSummary s;
        {
          py::gil_scoped_release release;
          s = dgl::run_experiment(config);
        }
        if (!out.empty()) dgl::write_run_artifacts(s, out);
        return py::module_::import("json").attr("loads")(dgl::summary_json(s));
      },
      py::arg("config"), py::arg("seed") = std::nullopt, py::arg("out") = "",
      "Runs an experiment from config text; returns the summary as a dict");
  m.def(
      "metrics_csv",
      [](const std::string& text) {
        const auto s = dgl::run_experiment(dgl::parse_config(text));
        return dgl::metrics_csv(s.records);
      },
      py::arg("config"));
}

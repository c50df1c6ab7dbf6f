// Python bindings. Images cross the boundary as float32 numpy arrays, {C,H,W}
// or {N,C,H,W}.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <algorithm>
#include <optional>

#include "encvit/attacks.hpp"
#include "encvit/bytes.hpp"
#include "encvit/dataset.hpp"
#include "encvit/ensemble.hpp"
#include "encvit/error.hpp"
#include "encvit/perm.hpp"
#include "encvit/vit.hpp"

namespace py = pybind11;
using namespace encvit;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor<float> to_tensor(const FloatArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor<float>(std::move(shape), AlignedVector<float>(a.data(), a.data() + a.size()));
}

template <class T>
py::array_t<T> to_array(const Tensor<T>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<T> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::tuple dataset_tuple(const Dataset& ds) {
  py::array_t<std::int32_t> labels(static_cast<py::ssize_t>(ds.labels.size()));
  std::copy(ds.labels.begin(), ds.labels.end(), labels.mutable_data());
  return py::make_tuple(to_array(ds.images), labels);
}

ImageGeometry geometry_of(const py::tuple& chw) {
  if (chw.size() != 3) throw InvalidInput("geometry must be (C, H, W)");
  return {chw[0].cast<std::uint32_t>(), chw[1].cast<std::uint32_t>(), chw[2].cast<std::uint32_t>()};
}

py::dict result_dict(const AttackResult& r) {
  py::dict d;
  d["x_adv"] = to_array(r.x_adv);
  d["success"] = r.success;
  d["queries_used"] = r.queries_used;
  d["gradient_calls"] = r.gradient_calls;
  d["linf_norm"] = r.linf_norm;
  return d;
}

// Owns its surrogate so Python never sees the abstract interface.
struct SurrogateHandle {
  std::shared_ptr<const Surrogate> impl;
};

struct Weights {
  std::shared_ptr<const VitParams<float>> params;
};

SelectionPolicy policy_of(const std::string& mode, std::size_t s_min, std::size_t s_max) {
  return parse_policy_mode(mode) == PolicyMode::simple ? SelectionPolicy::simple()
                                                       : SelectionPolicy::random(s_min, s_max);
}

}  // namespace

PYBIND11_MODULE(_encvit, m) {
  m.doc() = "C++ core of the encvit package";

  static py::exception<Error> base(m, "EncVitError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(base, e.what());
    }
  });

  py::class_<PermutationKey>(m, "Key")
      .def_property_readonly("id", &PermutationKey::id)
      .def_property_readonly("seed", &PermutationKey::seed)
      .def_property_readonly("block_pixels", &PermutationKey::block_pixels)
      .def("fingerprint", &PermutationKey::fingerprint)
      .def("__eq__", [](const PermutationKey& a, const PermutationKey& b) { return a == b; });

  py::class_<KeySet>(m, "KeySet")
      .def_readonly("block", &KeySet::block)
      .def_property_readonly("geometry", [](const KeySet& k) {
        return py::make_tuple(k.image.channels, k.image.height, k.image.width);
      })
      .def_readonly("keys", &KeySet::keys)
      .def("__len__", &KeySet::size)
      .def("__getitem__", [](const KeySet& k, const std::string& id) { return k.at(id); })
      .def("serialize", &serialize_keyset)
      .def_static("parse", [](const std::string& text) { return parse_keyset(text); });

  m.def("generate_key", &generate_key, py::arg("seed"), py::arg("block_pixels"), py::arg("key_id") = "");
  m.def(
      "generate_keyset",
      [](std::size_t n, std::uint32_t block, const py::tuple& chw, std::uint64_t seed) {
        return generate_keyset(n, block, geometry_of(chw), seed);
      },
      py::arg("n"), py::arg("block") = 4, py::arg("geometry") = py::make_tuple(3, 32, 32),
      py::arg("seed") = 0);

  m.def(
      "encrypt",
      [](const FloatArray& x, const PermutationKey& key, std::uint32_t block) {
        return to_array(encrypt_image(to_tensor(x), key, block));
      },
      py::arg("x"), py::arg("key"), py::arg("block") = 4);
  m.def(
      "decrypt",
      [](const FloatArray& x, const PermutationKey& key, std::uint32_t block) {
        return to_array(decrypt_image(to_tensor(x), key, block));
      },
      py::arg("x"), py::arg("key"), py::arg("block") = 4);

  m.def(
      "synthetic_dataset",
      [](std::uint64_t seed, std::size_t n_train, std::size_t n_test) {
        const DatasetSplits s = gen_synthetic_dataset(seed, n_train, n_test);
        return py::make_tuple(dataset_tuple(s.train), dataset_tuple(s.test));
      },
      py::arg("seed"), py::arg("n_train"), py::arg("n_test"),
      "Returns ((train_images, train_labels), (test_images, test_labels)).");
  m.def("load_dataset", [](const std::string& path) { return dataset_tuple(load_dataset(path)); });

  py::class_<Weights>(m, "Weights")
      .def("save", [](const Weights& w, const std::string& path) { write_file_atomic(path, encode_weights(*w.params)); })
      .def_static("load", [](const std::string& path) {
        return Weights{std::make_shared<const VitParams<float>>(decode_weights(read_file(path)))};
      });

  m.def(
      "train_model",
      [](const FloatArray& images, const std::vector<Label>& labels, std::optional<PermutationKey> key,
         std::uint32_t block, std::uint32_t epochs, std::uint32_t embed_dim, std::uint32_t depth,
         std::uint32_t heads, double lr, std::uint32_t batch_size, std::uint64_t seed) {
        Tensor<float> x = to_tensor(images);
        if (key) x = encrypt_image(x, *key, block);
        VitConfig model;
        model.image = {static_cast<std::uint32_t>(x.extent(1)), static_cast<std::uint32_t>(x.extent(2)),
                       static_cast<std::uint32_t>(x.extent(3))};
        model.patch = block;
        model.embed_dim = embed_dim;
        model.depth = depth;
        model.heads = heads;
        model.num_classes = static_cast<std::uint32_t>(*std::max_element(labels.begin(), labels.end()) + 1);
        TrainConfig tc;
        tc.epochs = epochs;
        tc.learning_rate = lr;
        tc.batch_size = batch_size;
        tc.rng_seed = seed;
        py::gil_scoped_release release;
        return Weights{std::make_shared<const VitParams<float>>(train(model, {x, labels}, tc).params)};
      },
      py::arg("images"), py::arg("labels"), py::arg("key") = std::nullopt, py::arg("block") = 4,
      py::arg("epochs") = 5, py::arg("embed_dim") = 32, py::arg("depth") = 1, py::arg("heads") = 2,
      py::arg("lr") = 0.05, py::arg("batch_size") = 32, py::arg("seed") = 0,
      "Train a classifier, on images encrypted with `key` when one is given.");

  py::class_<SurrogateHandle>(m, "Model")
      .def_property_readonly("num_classes", [](const SurrogateHandle& s) { return s.impl->num_classes(); })
      .def("probabilities",
           [](const SurrogateHandle& s, const FloatArray& x) { return to_array(s.impl->probabilities(to_tensor(x))); })
      .def_property_readonly("gradient_calls", [](const SurrogateHandle& s) { return s.impl->gradient_calls(); });
  m.def(
      "load_model",
      [](const std::string& path) {
        auto params = std::make_shared<const VitParams<float>>(decode_weights(read_file(path)));
        return SurrogateHandle{plain_surrogate(params)};
      },
      "Plain (unencrypted) model usable as a 0-key surrogate.");
  m.def("plain_model", [](const Weights& w) { return SurrogateHandle{plain_surrogate(w.params)}; });

  py::class_<EnsembleModel>(m, "Ensemble")
      .def("__len__", &EnsembleModel::size)
      .def_property_readonly("num_classes", &EnsembleModel::num_classes)
      .def_property_readonly("seed", &EnsembleModel::seed)
      .def_property_readonly("policy", [](const EnsembleModel& e) { return e.policy().describe(e.size()); })
      .def("predict", [](EnsembleModel& e, const FloatArray& x) { return to_array(e.predict(to_tensor(x))); })
      .def("classify", [](EnsembleModel& e, const FloatArray& x) { return classify(e.predict(to_tensor(x))); })
      .def(
          "with_policy",
          [](const EnsembleModel& e, const std::string& mode, std::size_t s_min, std::size_t s_max,
             std::uint64_t seed) {
            return e.with_policy(policy_of(mode, s_min, s_max), seed);
          },
          py::arg("mode"), py::arg("s_min") = 3, py::arg("s_max") = 0, py::arg("seed") = 0)
      .def(
          "leaked_surrogate",
          [](const EnsembleModel& e, const std::vector<std::string>& ids) {
            return SurrogateHandle{leaked_key_surrogate(e, ids)};
          },
          py::arg("key_ids"), py::keep_alive<0, 1>());
  m.def("load_ensemble", [](const std::string& path) { return load_ensemble(path); });
  m.def(
      "make_ensemble",
      [](const KeySet& keys, const std::vector<Weights>& weights, const std::string& mode, std::size_t s_min,
         std::size_t s_max, std::uint64_t seed) {
        if (weights.size() != keys.size()) throw InvalidInput("one weight set per key required");
        std::vector<SubModel> subs;
        for (std::size_t i = 0; i < weights.size(); ++i) subs.push_back({weights[i].params, keys.keys[i].id(), 0});
        return EnsembleModel(keys, std::move(subs), policy_of(mode, s_min, s_max), seed);
      },
      py::arg("keys"), py::arg("weights"), py::arg("mode") = "random", py::arg("s_min") = 3, py::arg("s_max") = 0,
      py::arg("seed") = 0);

  py::class_<AttackBudget>(m, "Budget")
      .def(py::init([](const std::string& spec) { return spec.empty() ? AttackBudget{} : parse_budget(spec); }),
           py::arg("spec") = "")
      .def_property_readonly("eps", &AttackBudget::eps)
      .def_readwrite("steps", &AttackBudget::steps)
      .def_readwrite("restarts", &AttackBudget::restarts)
      .def_readwrite("query_budget", &AttackBudget::query_budget)
      .def("__str__", &format_budget);

  m.def(
      "fgsm",
      [](const SurrogateHandle& s, const FloatArray& x, Label y, const std::string& eps) {
        return result_dict(fgsm(*s.impl, to_tensor(x), y, Rational::parse(eps)));
      },
      py::arg("model"), py::arg("x"), py::arg("y"), py::arg("eps") = "8/255");
  m.def(
      "pgd_ce",
      [](const SurrogateHandle& s, const FloatArray& x, Label y, const AttackBudget& b, std::uint64_t seed) {
        return result_dict(pgd_ce(*s.impl, to_tensor(x), y, b, seed));
      },
      py::arg("model"), py::arg("x"), py::arg("y"), py::arg("budget") = AttackBudget{}, py::arg("seed") = 0);
  m.def(
      "pgd_targeted",
      [](const SurrogateHandle& s, const FloatArray& x, Label y, Label target, const AttackBudget& b,
         std::uint64_t seed) { return result_dict(pgd_targeted(*s.impl, to_tensor(x), y, target, b, seed)); },
      py::arg("model"), py::arg("x"), py::arg("y"), py::arg("target"), py::arg("budget") = AttackBudget{},
      py::arg("seed") = 0);
  m.def(
      "square_attack",
      [](EnsembleModel& e, const FloatArray& x, Label y, const AttackBudget& b, std::uint64_t seed,
         bool label_only) {
        QueryAccess q = QueryAccess::of(e, label_only ? OutputMode::label : OutputMode::probabilities);
        return result_dict(square_attack(q, to_tensor(x), y, b, seed));
      },
      py::arg("ensemble"), py::arg("x"), py::arg("y"), py::arg("budget") = AttackBudget{}, py::arg("seed") = 0,
      py::arg("label_only") = false);
}

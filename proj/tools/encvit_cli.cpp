// encvit: command-line front end.
//
// Exit codes: 0 success, 1 module error, 2 usage error. Errors are printed as
// one line: "error[<kind>]: <message>".

#include <sys/stat.h>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "encvit/attacks.hpp"
#include "encvit/bytes.hpp"
#include "encvit/dataset.hpp"
#include "encvit/ensemble.hpp"
#include "encvit/harness.hpp"
#include "encvit/perm.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace encvit;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

fs::path default_out_dir() {
  const char* env = std::getenv("ENCVIT_OUT_DIR");
  return env && *env ? fs::path(env) : fs::path(".");
}

// Relative output paths land in ENCVIT_OUT_DIR when it is set.
fs::path out_path(const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : default_out_dir() / path;
}

void print_config(const std::string& verb, const json& cfg) {
  json doc;
  doc["verb"] = verb;
  doc.update(cfg);
  std::cout << "config " << doc.dump() << "\n";
}

void require_input(const std::string& path) {
  if (!fs::is_regular_file(path)) throw UsageError("input file '" + path + "' does not exist");
}

void warn_if_world_readable(const std::string& path) {
  struct stat st {};
  if (::stat(path.c_str(), &st) == 0 && (st.st_mode & S_IROTH))
    std::cerr << "warning: keyset '" << path << "' is world-readable\n";
}

KeySet load_keys(const std::string& path) {
  require_input(path);
  warn_if_world_readable(path);
  const auto bytes = read_file(path);
  return parse_keyset(std::string(bytes.begin(), bytes.end()));
}

std::shared_ptr<const VitParams<float>> load_weights(const std::string& path) {
  require_input(path);
  return std::make_shared<const VitParams<float>>(decode_weights(read_file(path)));
}

std::vector<std::size_t> parse_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoul(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw UsageError("bad integer list '" + text + "'");
    }
  }
  if (out.empty()) throw UsageError("empty integer list");
  return out;
}

Dataset limit(const Dataset& ds, std::size_t n) {
  return n == 0 || n >= ds.size() ? ds : ds.subset(0, n);
}

struct TrainOpts {
  std::uint32_t epochs = 20;
  double lr = 0.05;
  double momentum = 0.9;
  std::uint32_t batch = 32;
  std::uint32_t warmup = 1;
  bool cosine = true;
  double clip = 1.0;
  std::uint32_t patience = 0;
  std::uint32_t dim = 64, depth = 2, heads = 4;

  void add(CLI::App* app) {
    app->add_option("--epochs", epochs, "Training epochs")->capture_default_str();
    app->add_option("--lr", lr, "Learning rate")->capture_default_str();
    app->add_option("--momentum", momentum, "SGD momentum")->capture_default_str();
    app->add_option("--batch-size", batch, "Minibatch size")->capture_default_str();
    app->add_option("--warmup", warmup, "Warmup epochs")->capture_default_str();
    app->add_option("--cosine", cosine, "Cosine decay (0/1)")->capture_default_str();
    app->add_option("--grad-clip", clip, "Global gradient-norm clip, 0 = off")->capture_default_str();
    app->add_option("--patience", patience, "Early-stop patience, 0 = off")->capture_default_str();
    app->add_option("--dim", dim, "Embedding width")->capture_default_str();
    app->add_option("--depth", depth, "Transformer blocks")->capture_default_str();
    app->add_option("--heads", heads, "Attention heads")->capture_default_str();
  }
  TrainConfig train(std::uint64_t seed) const {
    TrainConfig c;
    c.learning_rate = lr;
    c.momentum = momentum;
    c.epochs = epochs;
    c.batch_size = batch;
    c.rng_seed = seed;
    c.grad_clip = clip;
    c.patience = patience;
    c.warmup_epochs = warmup;
    c.cosine = cosine;
    return c;
  }
  VitConfig model(ImageGeometry g, std::uint32_t patch, std::uint32_t classes) const {
    VitConfig c;
    c.image = g;
    c.patch = patch;
    c.embed_dim = dim;
    c.depth = depth;
    c.heads = heads;
    c.num_classes = classes;
    return c;
  }
  json to_json() const {
    return {{"epochs", epochs}, {"lr", lr},         {"momentum", momentum},
            {"batch_size", batch}, {"warmup", warmup}, {"cosine", cosine},
            {"grad_clip", clip},   {"patience", patience}, {"dim", dim},
            {"depth", depth},      {"heads", heads}};
  }
};

std::string trace_csv(const std::vector<EpochStats>& trace) {
  std::ostringstream out;
  out << "epoch,loss,train_accuracy,val_accuracy\n";
  for (const EpochStats& e : trace)
    out << e.epoch << ',' << e.loss << ',' << e.train_accuracy << ','
        << (e.val_accuracy ? std::to_string(*e.val_accuracy) : "") << '\n';
  return out.str();
}

SelectionPolicy make_policy(const std::string& mode, std::size_t s_min, std::size_t s_max) {
  return parse_policy_mode(mode) == PolicyMode::simple ? SelectionPolicy::simple()
                                                       : SelectionPolicy::random(s_min, s_max);
}

int run(int argc, char** argv) {
  CLI::App app{"Key-based random ensemble defense: data, keys, training and attacks"};
  app.require_subcommand(1);
  // Options may come from a TOML file; each verb reads its own [section].
  app.set_config("--config", "", "Experiment config file (TOML)");
  std::uint64_t seed = 0;
  unsigned jobs = 1;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--seed", seed, "Master seed")->capture_default_str();
    sub->add_option("--jobs", jobs, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  };

  // gen-data
  auto* gen_data = app.add_subcommand("gen-data", "Generate the synthetic shapes dataset");
  std::size_t n_train = 5000, n_test = 1000;
  std::string train_out = "train.dset", test_out = "test.dset";
  gen_data->add_option("--n-train", n_train)->capture_default_str();
  gen_data->add_option("--n-test", n_test)->capture_default_str();
  gen_data->add_option("--train-out", train_out)->capture_default_str();
  gen_data->add_option("--test-out", test_out)->capture_default_str();
  common(gen_data);

  // gen-keys
  auto* gen_keys = app.add_subcommand("gen-keys", "Generate a keyset of N block permutations");
  std::size_t n_keys = 0;
  std::uint32_t block = 4;
  std::string geometry = "3x32x32", keys_out;
  bool force = false;
  gen_keys->add_option("--n", n_keys, "Number of keys")->required();
  gen_keys->add_option("--block", block, "Block size M")->capture_default_str();
  gen_keys->add_option("--geometry", geometry, "Image geometry CxHxW")->capture_default_str();
  gen_keys->add_option("--out", keys_out, "Keyset file")->required();
  gen_keys->add_flag("--force", force, "Overwrite an existing keyset");
  common(gen_keys);

  // train
  auto* train_cmd = app.add_subcommand("train", "Train the plain baseline or one sub-model per key");
  std::string data_path, val_path, keys_path, out_dir = "model";
  std::string policy_mode = "random";
  std::size_t s_min = 3, s_max = 0;
  std::uint64_t ensemble_seed = 0;
  TrainOpts topts;
  train_cmd->add_option("--data", data_path, "Training set (DSET)")->required();
  train_cmd->add_option("--val", val_path, "Validation set (DSET)")->required();
  train_cmd->add_option("--keys", keys_path, "Keyset; omit to train the plain baseline");
  train_cmd->add_option("--out-dir", out_dir)->capture_default_str();
  train_cmd->add_option("--policy", policy_mode, "Manifest policy: simple|random")->capture_default_str();
  train_cmd->add_option("--s-min", s_min)->capture_default_str();
  train_cmd->add_option("--s-max", s_max, "0 = N")->capture_default_str();
  train_cmd->add_option("--ensemble-seed", ensemble_seed, "Selection stream seed")->capture_default_str();
  topts.add(train_cmd);
  common(train_cmd);

  // encrypt / decrypt
  std::string key_id, in_path, out_file;
  auto* encrypt = app.add_subcommand("encrypt", "Encrypt a dataset with one key");
  auto* decrypt = app.add_subcommand("decrypt", "Decrypt a dataset with one key");
  for (auto* sub : {encrypt, decrypt}) {
    sub->add_option("--keys", keys_path, "Keyset")->required();
    sub->add_option("--key-id", key_id, "Key id")->required();
    sub->add_option("--in", in_path, "Input DSET")->required();
    sub->add_option("--out", out_file, "Output DSET")->required();
    common(sub);
  }

  // predict
  auto* predict = app.add_subcommand("predict", "Classify a dataset with an ensemble or plain model");
  std::string manifest_path, weights_path, preds_out;
  std::size_t limit_n = 0;
  predict->add_option("--ensemble", manifest_path, "Ensemble manifest");
  predict->add_option("--weights", weights_path, "Plain model weights");
  predict->add_option("--in", in_path, "Input DSET")->required();
  predict->add_option("--out", preds_out, "Predictions CSV");
  predict->add_option("--policy", policy_mode, "Override: simple|random");
  predict->add_option("--s-min", s_min)->capture_default_str();
  predict->add_option("--s-max", s_max)->capture_default_str();
  predict->add_option("--limit", limit_n, "First n images only")->capture_default_str();
  common(predict);

  // attack
  auto* attack = app.add_subcommand("attack", "Run one attack and write the adversarial images");
  std::string attack_name = "pgd-ce", budget_text, baseline_path, leaked;
  std::uint32_t target_offset = 1;
  attack->add_option("--attack", attack_name, "fgsm|pgd-ce|pgd-t|square")->capture_default_str();
  attack->add_option("--ensemble", manifest_path, "Target ensemble manifest")->required();
  attack->add_option("--baseline", baseline_path, "0-key surrogate weights");
  attack->add_option("--leaked", leaked, "Comma-separated leaked key ids");
  attack->add_option("--policy", policy_mode, "Override: simple|random");
  attack->add_option("--budget", budget_text, "e.g. eps=8/255,steps=20,queries=1000");
  attack->add_option("--target-offset", target_offset, "pgd-t target = (y + offset) mod K")->capture_default_str();
  attack->add_option("--in", in_path, "Input DSET")->required();
  attack->add_option("--out", out_file, "Adversarial DSET")->required();
  attack->add_option("--limit", limit_n)->capture_default_str();
  common(attack);

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "Attack suite against one ensemble");
  std::string report_out = "report.csv";
  std::uint32_t targets = 1;
  bool label_only = false;
  evaluate->add_option("--ensemble", manifest_path)->required();
  evaluate->add_option("--baseline", baseline_path, "0-key surrogate weights");
  evaluate->add_option("--leaked", leaked, "Comma-separated leaked key ids");
  evaluate->add_option("--policy", policy_mode, "Override: simple|random");
  evaluate->add_option("--s-min", s_min)->capture_default_str();
  evaluate->add_option("--s-max", s_max)->capture_default_str();
  evaluate->add_option("--budget", budget_text);
  evaluate->add_option("--data", in_path, "Test DSET")->required();
  evaluate->add_option("--limit", limit_n)->capture_default_str();
  evaluate->add_option("--targets", targets, "Targets per image for pgd-t")->capture_default_str();
  evaluate->add_flag("--label-only", label_only, "Square sees labels only");
  evaluate->add_option("--out", report_out, "Report CSV (JSON written alongside)")->capture_default_str();
  common(evaluate);

  // report
  auto* report = app.add_subcommand("report", "Run the experiment tables and write reports");
  std::string experiment = "all", ns_text = "4,5", leaks_text;
  std::size_t n_main = 4;
  report->add_option("--experiment", experiment, "model-comparison|submodel-count|key-leak|all")->capture_default_str();
  report->add_option("--ensemble", manifest_path, "Manifest with the largest N")->required();
  report->add_option("--baseline", baseline_path, "Plain baseline weights")->required();
  report->add_option("--data", in_path, "Test DSET")->required();
  report->add_option("--limit", limit_n)->capture_default_str();
  report->add_option("--budget", budget_text);
  report->add_option("--n", n_main, "N for comparison and key-leak")->capture_default_str();
  report->add_option("--ns", ns_text, "N values for submodel-count")->capture_default_str();
  report->add_option("--leaks", leaks_text, "Leak counts (default 0..N)");
  report->add_option("--targets", targets)->capture_default_str();
  report->add_option("--out-dir", out_dir, "Report directory")->capture_default_str();
  common(report);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error[usage]: " << e.what() << "\n";
    return 2;
  }

  if (gen_data->parsed()) {
    print_config("gen-data", {{"seed", seed}, {"n_train", n_train}, {"n_test", n_test},
                              {"train_out", out_path(train_out)}, {"test_out", out_path(test_out)}});
    const DatasetSplits s = gen_synthetic_dataset(seed, n_train, n_test);
    save_dataset(s.train, out_path(train_out));
    save_dataset(s.test, out_path(test_out));
    std::cout << "wrote " << s.train.size() << " train / " << s.test.size() << " test images\n";
    return 0;
  }

  if (gen_keys->parsed()) {
    const fs::path out = out_path(keys_out);
    print_config("gen-keys", {{"seed", seed}, {"n", n_keys}, {"block", block},
                              {"geometry", geometry}, {"out", out}});
    if (fs::exists(out) && !force)
      throw UsageError("refusing to overwrite keyset '" + out.string() + "' (use --force)");
    const KeySet ks = generate_keyset(n_keys, block, parse_geometry(geometry), seed);
    write_file_atomic(out, serialize_keyset(ks));
    fs::permissions(out, fs::perms::owner_read | fs::perms::owner_write, fs::perm_options::replace);
    std::cout << "wrote " << ks.size() << " keys of length " << ks.block_pixels() << "\n";
    return 0;
  }

  if (train_cmd->parsed()) {
    require_input(data_path);
    require_input(val_path);
    const fs::path dir = out_path(out_dir);
    json cfg = {{"seed", seed}, {"jobs", jobs}, {"data", data_path}, {"val", val_path},
                {"keys", keys_path}, {"out_dir", dir}, {"train", topts.to_json()}};
    if (!keys_path.empty()) {
      cfg["policy"] = policy_mode;
      cfg["s_min"] = s_min;
      cfg["s_max"] = s_max;
      cfg["ensemble_seed"] = ensemble_seed;
      cfg["submodel_seeds"] = "derive_seed(seed, 0x5355424d, i)";
    }
    print_config("train", cfg);
    const Dataset train = load_dataset(data_path);
    const Dataset val = load_dataset(val_path);
    fs::create_directories(dir);
    const TrainConfig tc = topts.train(seed);
    if (keys_path.empty()) {
      const VitConfig model = topts.model(train.geometry(), 4, train.num_classes);
      const TrainedModel m = train_baseline(train, val, model, tc);
      write_file_atomic(dir / "baseline.tvit", encode_weights(*m.params));
      write_file_atomic(dir / "baseline_trace.csv", trace_csv(m.trace));
      std::cout << "baseline val_accuracy " << m.val_accuracy << "\n";
      return 0;
    }
    const KeySet keys = load_keys(keys_path);
    const SelectionPolicy policy = make_policy(policy_mode, s_min, s_max);
    policy.resolve(keys.size());
    const VitConfig model = topts.model(keys.image, keys.block, train.num_classes);
    std::vector<std::vector<EpochStats>> traces;
    const auto subs = train_submodels(train, val, keys, model, tc, jobs, &traces);
    EnsembleManifest m;
    m.keyset = fs::absolute(keys_path).string();
    m.policy = policy;
    m.seed = ensemble_seed;
    for (std::size_t i = 0; i < subs.size(); ++i) {
      const std::string name = "sub_" + subs[i].key_id + ".tvit";
      const auto bytes = encode_weights(*subs[i].params);
      write_file_atomic(dir / name, bytes);
      write_file_atomic(dir / ("sub_" + subs[i].key_id + "_trace.csv"), trace_csv(traces[i]));
      m.entries.push_back({subs[i].key_id, name, sha256_hex(bytes), subs[i].clean_val_accuracy});
      std::cout << "sub-model " << subs[i].key_id << " val_accuracy " << subs[i].clean_val_accuracy << "\n";
    }
    write_file_atomic(dir / "manifest.json", serialize_manifest(m));
    return 0;
  }

  if (encrypt->parsed() || decrypt->parsed()) {
    const bool enc = encrypt->parsed();
    print_config(enc ? "encrypt" : "decrypt", {{"seed", seed}, {"keys", keys_path}, {"key_id", key_id},
                                               {"in", in_path}, {"out", out_path(out_file)}});
    require_input(in_path);
    const KeySet keys = load_keys(keys_path);
    Dataset ds = load_dataset(in_path);
    detail::require(ds.geometry() == keys.image, "cli", "dataset geometry does not match keyset");
    const PermutationKey& key = keys.at(key_id);
    ds.images = enc ? encrypt_image(ds.images, key, keys.block) : decrypt_image(ds.images, key, keys.block);
    save_dataset(ds, out_path(out_file));
    std::cout << (enc ? "encrypted " : "decrypted ") << ds.size() << " images\n";
    return 0;
  }

  // Verbs below need a target model.
  auto load_target = [&](CLI::App* sub) {
    if (!manifest_path.empty()) {
      require_input(manifest_path);
      EnsembleModel e = load_ensemble(manifest_path);
      auto given = [sub](const char* name) {
        const CLI::Option* o = sub->get_option_no_throw(name);
        return o != nullptr && o->count() > 0;
      };
      if (given("--policy") || given("--s-min") || given("--s-max"))
        return e.with_policy(make_policy(policy_mode, s_min, s_max), e.seed() ^ seed);
      return e.with_policy(e.policy(), e.seed() ^ seed);
    }
    if (weights_path.empty()) throw UsageError("one of --ensemble or --weights is required");
    auto params = load_weights(weights_path);
    KeySet ks;
    ks.block = params->config().patch;
    ks.image = params->config().image;
    ks.keys.push_back(identity_key(ks.block_pixels(), "plain"));
    return EnsembleModel(ks, {{params, "plain", 0}}, SelectionPolicy::simple(), seed);
  };
  auto knowledge_for = [&](const EnsembleModel& target) {
    AttackerKnowledge k;
    if (!leaked.empty()) {
      std::stringstream ss(leaked);
      for (std::string id; std::getline(ss, id, ',');) k.leaked_key_ids.push_back(id);
      k.surrogate = leaked_key_surrogate(target, k.leaked_key_ids);
      k.description = "leaked keys";
    } else if (!baseline_path.empty()) {
      k.surrogate = plain_surrogate(load_weights(baseline_path));
      k.description = "0-key (plain surrogate)";
    }
    return k;
  };
  const AttackBudget budget = budget_text.empty() ? AttackBudget{} : parse_budget(budget_text);

  if (predict->parsed()) {
    require_input(in_path);
    EnsembleModel target = load_target(predict);
    print_config("predict", {{"seed", seed}, {"ensemble", manifest_path}, {"weights", weights_path},
                             {"in", in_path}, {"policy", target.policy().describe(target.size())},
                             {"selection_seed", target.seed()}, {"limit", limit_n}});
    const Dataset ds = limit(load_dataset(in_path), limit_n);
    const auto labels = classify(target.predict(ds.images));
    std::size_t correct = 0;
    std::ostringstream csv;
    csv << "index,label,prediction\n";
    for (std::size_t i = 0; i < labels.size(); ++i) {
      correct += labels[i] == ds.labels[i];
      csv << i << ',' << ds.labels[i] << ',' << labels[i] << '\n';
    }
    if (!preds_out.empty()) write_file_atomic(out_path(preds_out), csv.str());
    std::cout << "accuracy " << static_cast<double>(correct) / static_cast<double>(labels.size()) << "\n";
    return 0;
  }

  if (attack->parsed()) {
    require_input(in_path);
    EnsembleModel target = load_target(attack);
    const AttackerKnowledge know = knowledge_for(target);
    print_config("attack", {{"seed", seed}, {"attack", attack_name}, {"budget", format_budget(budget)},
                            {"ensemble", manifest_path}, {"knowledge", know.description},
                            {"selection_seed", target.seed()}, {"in", in_path},
                            {"out", out_path(out_file)}, {"limit", limit_n}});
    Dataset ds = limit(load_dataset(in_path), limit_n);
    const bool gradient = attack_name != "square";
    if (attack_name != "fgsm" && attack_name != "pgd-ce" && attack_name != "pgd-t" && gradient)
      throw UsageError("unknown attack '" + attack_name + "'");
    if (gradient && !know.surrogate) throw UsageError("gradient attacks need --baseline or --leaked");
    const std::size_t k = target.num_classes();
    std::size_t fooled = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const Tensor<float> x = ds.images.slice(i);
      const Label y = ds.labels[i];
      const std::uint64_t s = derive_seed(seed, 0x41545441ULL, i);
      AttackResult r;
      if (attack_name == "fgsm") {
        r = fgsm(*know.surrogate, x, y, budget.epsilon);
      } else if (attack_name == "pgd-ce") {
        r = pgd_ce(*know.surrogate, x, y, budget, s);
      } else if (attack_name == "pgd-t") {
        const auto t = static_cast<Label>((static_cast<std::size_t>(y) + target_offset) % k);
        r = pgd_targeted(*know.surrogate, x, y, t, budget, s);
      } else {
        EnsembleModel ens = target.split(s);
        QueryAccess q = QueryAccess::of(ens);
        r = square_attack(q, x, y, budget, s);
      }
      const bool wrong = classify(target.predict(r.x_adv).row(0)) != y;
      fooled += wrong;
      std::copy(r.x_adv.data().begin(), r.x_adv.data().end(), ds.images.row(i).begin());
      std::cout << "image " << i << " label " << y << " fooled " << wrong << " linf " << r.linf_norm
                << " queries " << r.queries_used << " gradient_calls " << r.gradient_calls << "\n";
    }
    ds.provenance += ":adv=" + attack_name;
    save_dataset(ds, out_path(out_file));
    std::cout << "robust_accuracy " << 1.0 - static_cast<double>(fooled) / static_cast<double>(ds.size()) << "\n";
    return 0;
  }

  if (evaluate->parsed()) {
    require_input(in_path);
    EnsembleModel target = load_target(evaluate);
    const AttackerKnowledge know = knowledge_for(target);
    SuiteConfig suite;
    suite.budget = budget;
    suite.seed = seed;
    suite.jobs = jobs;
    suite.targets_per_image = targets;
    suite.output = label_only ? OutputMode::label : OutputMode::probabilities;
    suite.pgd_ce = suite.pgd_targeted = know.surrogate != nullptr;
    print_config("evaluate", {{"seed", seed}, {"jobs", jobs}, {"budget", format_budget(budget)},
                              {"ensemble", manifest_path}, {"policy", target.policy().describe(target.size())},
                              {"selection_seed", target.seed()}, {"knowledge", know.description},
                              {"data", in_path}, {"limit", limit_n}, {"targets", targets},
                              {"label_only", label_only}, {"out", out_path(report_out)}});
    const Dataset ds = limit(load_dataset(in_path), limit_n);
    const SuiteResult r = run_suite(target, know, ds.view(), suite);
    EvalReport rep;
    rep.experiment = "evaluate";
    rep.rows.push_back({"ensemble", target.size(), target.policy().describe(target.size()),
                        know.leaked_key_ids.size(), r.clean, r.pgd_ce, r.pgd_targeted, r.square, r.aa});
    rep.metadata = {{"seed", std::to_string(seed)}, {"selection_seed", std::to_string(target.seed())},
                    {"budget", format_budget(budget)}, {"test_images", std::to_string(ds.size())},
                    {"knowledge", know.description}, {"aa_label", kAaLabel}};
    rep.deviations = standard_deviations();
    const fs::path out = out_path(report_out);
    write_file_atomic(out, emit_report(rep, ReportFormat::csv));
    fs::path meta = out;
    write_file_atomic(meta.replace_extension(".json"), emit_report(rep, ReportFormat::json));
    std::cout << emit_report(rep, ReportFormat::csv);
    return 0;
  }

  if (report->parsed()) {
    require_input(in_path);
    EnsembleModel pool = load_target(report);
    const auto baseline = load_weights(baseline_path);
    const Dataset ds = limit(load_dataset(in_path), limit_n);
    SuiteConfig suite;
    suite.budget = budget;
    suite.seed = seed;
    suite.jobs = jobs;
    suite.targets_per_image = targets;
    const auto ns = parse_list(ns_text);
    std::vector<std::size_t> leaks;
    if (leaks_text.empty())
      for (std::size_t k = 0; k <= n_main; ++k) leaks.push_back(k);
    else
      leaks = parse_list(leaks_text);
    const fs::path dir = out_path(out_dir);
    print_config("report", {{"seed", seed}, {"jobs", jobs}, {"experiment", experiment},
                            {"budget", format_budget(budget)}, {"ensemble", manifest_path},
                            {"selection_seed", pool.seed()}, {"baseline", baseline_path},
                            {"data", in_path}, {"limit", limit_n}, {"n", n_main}, {"ns", ns},
                            {"leaks", leaks}, {"targets", targets}, {"out_dir", dir}});
    std::map<std::string, SuiteResult> cache;
    ExperimentContext ctx{&ds, baseline, &pool, suite, &cache};
    std::vector<EvalReport> reports;
    const bool all = experiment == "all";
    if (all || experiment == "model-comparison") reports.push_back(experiment_model_comparison(ctx, n_main));
    if (all || experiment == "submodel-count") reports.push_back(experiment_submodel_count(ctx, ns));
    if (all || experiment == "key-leak") reports.push_back(experiment_key_leak(ctx, n_main, leaks));
    if (reports.empty()) throw UsageError("unknown experiment '" + experiment + "'");
    fs::create_directories(dir);
    for (const EvalReport& rep : reports) {
      write_file_atomic(dir / (rep.experiment + ".csv"), emit_report(rep, ReportFormat::csv));
      write_file_atomic(dir / (rep.experiment + ".json"), emit_report(rep, ReportFormat::json));
      std::cout << "# " << rep.experiment << "\n" << emit_report(rep, ReportFormat::csv);
    }
    return 0;
  }
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "error[usage]: " << e.what() << "\n";
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "error[parse]: " << e.what() << "\n";
    return 1;
  } catch (const InvalidInput& e) {
    std::cerr << "error[invalid-input]: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error[runtime]: " << e.what() << "\n";
    return 1;
  }
}

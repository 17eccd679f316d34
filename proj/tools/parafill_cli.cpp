#include <atomic>
#include <chrono>
#include <condition_variable>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <stop_token>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "parafill/checkpoint.hpp"
#include "parafill/hash.hpp"
#include "parafill/pipeline.hpp"
#include "parafill/service.hpp"

// After Eigen: <resolv.h>, pulled in by httplib, defines a `_res` macro.
#include <httplib.h>

namespace fs = std::filesystem;
using namespace parafill;

namespace {

struct Options {
  std::string config;

  // preprocess / annotate
  std::string raw_dir = "data/novels";
  std::string sidecar;
  std::string genre_map = "data/genre_map.json";
  std::string gazetteer = "data/gazetteer.json";
  std::string books;
  std::string out;
  std::size_t keywords = 10;

  // vocabulary and split
  std::string vocab;
  std::size_t vocab_size = 8192;
  double eval_fraction = 0.12;

  // model and training
  std::string format = "conditioned";
  int layers = 4;
  int heads = 4;
  int d_model = 128;
  int block_size = 1024;
  double dropout = 0.1;
  train::TrainConfig train;
  std::string log;

  // decoding
  std::string checkpoint;
  std::string context;
  std::string size = "M";
  std::string strategy = "sample";
  double temperature = 1.0;
  std::size_t top_k = 0;
  double top_p = 0.9;
  std::size_t beams = 1;
  double repetition_penalty = 1.0;
  std::size_t no_repeat_ngram = 0;
  std::size_t min_length = 0;
  std::size_t max_length = 0;
  std::uint64_t seed = 0;

  // evaluation
  std::string model;
  std::string baseline;
  std::string eval_set;
  std::string summarizer = "kw";
  std::size_t max_samples = 0;

  // serve
  std::string role = "all";
  std::string bind;
  std::string nodes;
  std::string static_dir;
};

/// Reads --config from argv and turns its keys into flags placed before the
/// user's own flags, so the command line wins (options take the last value).
std::vector<std::string> expand_config(const std::vector<std::string>& args, const CLI::App& app) {
  std::string path;
  for (std::size_t i = 0; i + 1 < args.size(); ++i) {
    if (args[i] == "--config") path = args[i + 1];
  }
  for (const auto& a : args) {
    if (a.rfind("--config=", 0) == 0) path = a.substr(9);
  }
  if (path.empty() || args.size() < 2) return args;
  const CLI::App* sub = nullptr;
  for (const auto* s : app.get_subcommands({})) {
    if (s->get_name() == args[1]) sub = s;
  }
  if (sub == nullptr) return args;

  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("config " + path + ": " + e.what());
  }
  if (!j.is_object()) throw DataError("config " + path + " must be a JSON object");
  nlohmann::json flat = nlohmann::json::object();
  for (const auto& [k, v] : j.items()) {
    if (!v.is_object()) flat[k] = v;
  }
  if (j.contains(args[1]) && j.at(args[1]).is_object()) {
    for (const auto& [k, v] : j.at(args[1]).items()) flat[k] = v;
  }

  std::vector<std::string> out(args.begin(), args.begin() + 2);
  for (const auto& [k, v] : flat.items()) {
    const CLI::Option* opt = sub->get_option_no_throw("--" + k);
    if (opt == nullptr || k == "config") continue;
    if (v.is_boolean()) {
      if (v.get<bool>()) out.push_back("--" + k);
    } else {
      out.push_back("--" + k);
      out.push_back(v.is_string() ? v.get<std::string>() : v.dump());
    }
  }
  out.insert(out.end(), args.begin() + 2, args.end());
  return out;
}

nlohmann::json effective_config(const CLI::App& sub) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto* opt : sub.get_options()) {
    if (opt->get_lnames().empty() || opt->get_lnames().front() == "help") continue;
    const auto& name = opt->get_lnames().front();
    if (opt->count() > 0) {
      const auto& r = opt->results();
      j[name] = r.size() == 1 ? nlohmann::json(r.front()) : nlohmann::json(r);
    } else {
      j[name] = opt->get_default_str();
    }
  }
  j["command"] = sub.get_name();
  return j;
}

void snapshot(const CLI::App& sub, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file_atomic(path, effective_config(sub).dump(2) + "\n");
}

fs::path sibling(const fs::path& p, const std::string& suffix) { return fs::path(p.string() + suffix); }

void require(const std::string& value, const std::string& flag) {
  if (value.empty()) throw UsageError("missing required option --" + flag);
}

std::vector<pipeline::EncodedBook> encode_texts(const std::vector<pipeline::NamedBook>& books,
                                                const tokenizer::Vocab& vocab) {
  std::vector<pipeline::EncodedBook> out;
  for (const auto& b : books) {
    pipeline::EncodedBook eb;
    for (const auto& p : b.book.paragraphs) {
      pipeline::EncodedParagraph ep;
      ep.text = vocab.encode(p.text);
      ep.size = p.size_class;
      eb.paragraphs.push_back(std::move(ep));
    }
    out.push_back(std::move(eb));
  }
  return out;
}

decode::DecodeParams decode_params(const Options& o) {
  decode::DecodeParams p;
  p.strategy = decode::parse_strategy(o.strategy);
  p.temperature = o.temperature;
  if (o.top_k > 0) p.top_k = o.top_k;
  if (o.top_p > 0.0) p.top_p = o.top_p;
  else p.top_p.reset();
  p.num_beams = o.beams;
  p.repetition_penalty = o.repetition_penalty;
  p.no_repeat_ngram_size = o.no_repeat_ngram;
  p.seed = o.seed;
  return p;
}

int cmd_preprocess(const Options& o, const CLI::App& sub) {
  require(o.out, "out");
  const fs::path sidecar = o.sidecar.empty() ? fs::path(o.raw_dir) / "metadata.json" : fs::path(o.sidecar);
  auto result = pipeline::preprocess(o.raw_dir, sidecar, corpus::GenreMap::load(o.genre_map));
  for (const auto& w : result.warnings) std::cerr << "warning: " << w << '\n';
  if (result.books.empty()) throw DataError("no books survived preprocessing");
  pipeline::write_books(o.out, result.books);
  snapshot(sub, fs::path(o.out) / "config.json");
  for (const auto& b : result.books) {
    std::cout << b.id << ": " << b.book.paragraphs.size() << " paragraphs, genre " << b.book.metadata.genre.value_or("-")
              << '\n';
  }
  return 0;
}

int cmd_annotate(const Options& o, const CLI::App& sub) {
  require(o.books, "books");
  require(o.out, "out");
  auto books = pipeline::read_books(o.books);
  annotate::AnnotateConfig cfg;
  cfg.n_keywords = o.keywords;
  pipeline::annotate_books(books, annotate::Gazetteer::load(o.gazetteer), cfg);
  pipeline::write_books(o.out, books);
  snapshot(sub, fs::path(o.out) / "config.json");
  std::cout << "annotated " << books.size() << " books\n";
  return 0;
}

int cmd_build_vocab(const Options& o, const CLI::App& sub) {
  require(o.books, "books");
  require(o.out, "out");
  const auto books = pipeline::read_books(o.books);
  tokenizer::TrainConfig cfg;
  cfg.target_vocab = o.vocab_size;
  const auto vocab = pipeline::build_vocab(books, cfg);
  vocab.save(o.out);
  const auto split = pipeline::split_triples(books, o.eval_fraction);
  const auto stats = pipeline::length_stats(encode_texts(books, vocab), split.train);
  write_file_atomic(fs::path(o.out) / "length_stats.json", nlohmann::json(stats).dump(2) + "\n");
  snapshot(sub, fs::path(o.out) / "config.json");
  std::cout << "vocabulary " << vocab.size() << " tokens, hash " << vocab.hash() << '\n';
  return 0;
}

int cmd_train(const Options& o, const CLI::App& sub) {
  require(o.books, "books");
  require(o.vocab, "vocab");
  require(o.out, "out");
  const auto books = pipeline::read_books(o.books);
  const auto vocab = tokenizer::Vocab::load(o.vocab);
  const auto stats =
      nlohmann::json::parse(read_file(fs::path(o.vocab) / "length_stats.json")).get<assembly::LengthStats>();
  const auto format = pipeline::parse_format(o.format);
  model::ModelConfig mc;
  mc.n_layers = o.layers;
  mc.n_heads = o.heads;
  mc.d_model = o.d_model;
  mc.block_size = o.block_size;
  mc.dropout = o.dropout;
  mc.vocab_size = static_cast<int>(vocab.size());
  mc.validate();
  const auto encoded = pipeline::encode_books(books, vocab);
  const auto split = pipeline::split_triples(books, o.eval_fraction);
  model::Transformer<float> m(mc);
  const fs::path log_path = o.log.empty() ? sibling(o.out, ".log.jsonl") : fs::path(o.log);
  if (log_path.has_parent_path()) fs::create_directories(log_path.parent_path());
  std::ofstream log(log_path);
  if (!log) throw DataError("cannot write " + log_path.string());
  const auto outcome = pipeline::train_model(m, encoded, split.train, vocab, format, o.train, &log);
  checkpoint::save(o.out, m, vocab.hash(), pipeline::checkpoint_meta(format, stats));
  snapshot(sub, sibling(o.out, ".config.json"));
  std::cout << nlohmann::json{{"checkpoint", o.out},
                              {"sha256", sha256_file(o.out)},
                              {"steps", outcome.summary.steps},
                              {"samples_per_epoch", outcome.samples_per_epoch},
                              {"dropped", outcome.dropped},
                              {"initial_loss", outcome.initial_loss},
                              {"final_loss", outcome.final_loss}}
                   .dump(2)
            << '\n';
  return 0;
}

int cmd_generate(const Options& o, const CLI::App& sub) {
  require(o.checkpoint, "checkpoint");
  require(o.vocab, "vocab");
  require(o.context, "context");
  const auto engine = pipeline::load_engine(o.checkpoint, o.vocab);
  nlohmann::json ctx;
  try {
    ctx = nlohmann::json::parse(read_file(o.context));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("context " + o.context + ": " + e.what());
  }
  if (!ctx.contains("size")) ctx["size"] = o.size;
  auto request = service::parse_generation_request(ctx).sections;
  if (sub.get_option("--size")->count() > 0) {
    const auto size = parse_size_class(o.size);
    if (!size) throw UsageError("size must be S, M or L");
    request.size = *size;
  }
  auto params = pipeline::with_length_bounds(decode_params(o), engine.lengths, request.size,
                                             pipeline::LengthPolicy::PerClass);
  if (o.min_length > 0) params.min_length = o.min_length;
  if (o.max_length > 0) params.max_length = o.max_length;
  const auto gen = pipeline::generate_p2(engine.model, engine.format, pipeline::request_sections(engine, request),
                                         engine.vocab, params);
  const nlohmann::json result{{"text", service::strip_special_names(gen.text)},
                              {"stop_reason", decode::to_string(gen.stop_reason)},
                              {"tokens", gen.ids.size()},
                              {"seed", params.seed},
                              {"decode_params", params}};
  if (!o.out.empty()) {
    write_file_atomic(o.out, result.dump(2) + "\n");
    snapshot(sub, sibling(o.out, ".config.json"));
  }
  std::cout << result.dump(2) << '\n';
  return 0;
}

int cmd_evaluate(const Options& o, const CLI::App& sub) {
  require(o.model, "model");
  require(o.baseline, "baseline");
  require(o.vocab, "vocab");
  require(o.eval_set, "eval-set");
  require(o.out, "out");
  const auto test = pipeline::load_engine(o.model, o.vocab);
  const auto base = pipeline::load_engine(o.baseline, o.vocab);
  const auto books = pipeline::read_books(o.eval_set);
  const auto encoded = pipeline::encode_books(books, test.vocab);
  const auto split = pipeline::split_triples(books, o.eval_fraction);
  pipeline::EvalConfig cfg;
  cfg.decode = decode_params(o);
  cfg.summary = pipeline::parse_summary_kind(o.summarizer);
  cfg.max_samples = o.max_samples;
  cfg.seed = o.seed;
  const auto [a, b] = pipeline::evaluate_run({&test.model, test.format, test.model_checksum},
                                             {&base.model, base.format, base.model_checksum}, base.model, books,
                                             encoded, split.eval, test.vocab, test.lengths, cfg, &std::cerr);
  nlohmann::json paired = nlohmann::json::object();
  for (const char* metric : {"entities_count", "kw_count", "size_ok", "rouge1_f", "bleu", "perplexity", "emb_sim"}) {
    const auto ci = pipeline::paired_difference(a, b, metric);
    paired[metric] = {{"mean_diff", ci.mean}, {"ci95", {ci.lower, ci.upper}}, {"lower_one_sided_95", ci.lower_one_sided},
                      {"n", ci.n}};
  }
  write_file_atomic(o.out, nlohmann::json{{"model", a.to_json()}, {"baseline", b.to_json()}, {"paired", paired}}.dump(2) + "\n");
  write_file_atomic(sibling(o.out, ".model.csv"), a.to_csv());
  write_file_atomic(sibling(o.out, ".baseline.csv"), b.to_csv());
  snapshot(sub, sibling(o.out, ".config.json"));
  std::cout << paired.dump(2) << '\n';
  return 0;
}

std::atomic<httplib::Server*> g_server{nullptr};

void on_signal(int) {
  if (auto* s = g_server.load()) s->stop();
}

int cmd_serve(const Options& o, const CLI::App&) {
  auto env = service::env_config();
  const std::string model = o.checkpoint.empty() ? env.model_path.value_or("") : o.checkpoint;
  const std::string vocab = o.vocab.empty() ? env.vocab_path.value_or("") : o.vocab;
  const std::string bind = o.bind.empty() ? env.bind_addr : o.bind;
  const std::string nodes = o.nodes.empty() ? env.nodes_file.value_or("") : o.nodes;
  const std::string gaz = env.gazetteer_path && o.gazetteer == "data/gazetteer.json" ? *env.gazetteer_path : o.gazetteer;

  service::ServiceConfig cfg;
  cfg.role = service::parse_role(o.role);
  if (!o.static_dir.empty()) cfg.static_dir = o.static_dir;
  std::shared_ptr<const pipeline::Engine> engine;
  if (!model.empty() && cfg.role != service::Role::Master && cfg.role != service::Role::Ner) {
    require(vocab, "vocab");
    engine = std::make_shared<const pipeline::Engine>(pipeline::load_engine(model, vocab));
  }
  std::optional<service::Router> router;
  if (!nodes.empty()) router.emplace(service::Router::load(nodes));
  const auto gazetteer = cfg.role == service::Role::Generate ? annotate::Gazetteer{} : annotate::Gazetteer::load(gaz);
  service::Service svc(cfg, gazetteer, engine, router);
  if (router) svc.probe_nodes();

  httplib::Server server;
  svc.mount(server);
  const auto [host, port] = service::parse_bind(bind);
  if (!server.bind_to_port(host, port)) throw DataError("cannot bind " + bind);
  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  // Nodes marked down by a failed request come back once a probe succeeds.
  std::jthread prober;
  if (router) {
    prober = std::jthread([&svc](std::stop_token stop) {
      std::mutex mu;
      std::condition_variable_any cv;
      std::unique_lock lock(mu);
      while (!cv.wait_for(lock, stop, std::chrono::seconds(10), [&stop] { return stop.stop_requested(); })) {
        svc.probe_nodes();
      }
    });
  }
  std::cerr << "serving role " << o.role << " on " << bind << std::endl;
  server.listen_after_bind();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"parafill: controllable paragraph infilling"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  Options o;

  auto add_config = [&](CLI::App* s) { s->add_option("--config", o.config, "JSON file of option values"); };
  auto add_split = [&](CLI::App* s) {
    s->add_option("--eval-fraction", o.eval_fraction, "held-out tail fraction of every book")->capture_default_str();
  };
  auto add_decode = [&](CLI::App* s) {
    s->add_option("--strategy", o.strategy, "greedy, beam or sample")->capture_default_str();
    s->add_option("--temperature", o.temperature)->capture_default_str();
    s->add_option("--top-k", o.top_k, "0 disables")->capture_default_str();
    s->add_option("--top-p", o.top_p, "0 disables")->capture_default_str();
    s->add_option("--beams", o.beams)->capture_default_str();
    s->add_option("--repetition-penalty", o.repetition_penalty)->capture_default_str();
    s->add_option("--no-repeat-ngram", o.no_repeat_ngram, "0 disables")->capture_default_str();
    s->add_option("--seed", o.seed)->capture_default_str();
  };

  auto* pre = app.add_subcommand("preprocess", "clean, filter and split raw books");
  add_config(pre);
  pre->add_option("--raw", o.raw_dir, "directory of raw text files")->capture_default_str();
  pre->add_option("--sidecar", o.sidecar, "metadata JSON (default: <raw>/metadata.json)");
  pre->add_option("--genre-map", o.genre_map)->capture_default_str();
  pre->add_option("--out", o.out, "output directory");

  auto* ann = app.add_subcommand("annotate", "add entities and summaries");
  add_config(ann);
  ann->add_option("--books", o.books, "preprocessed book directory");
  ann->add_option("--gazetteer", o.gazetteer)->capture_default_str();
  ann->add_option("--keywords", o.keywords, "keywords per paragraph")->capture_default_str();
  ann->add_option("--out", o.out, "output directory");

  auto* voc = app.add_subcommand("build-vocab", "train the BPE vocabulary and length statistics");
  add_config(voc);
  voc->add_option("--books", o.books, "book directory");
  voc->add_option("--vocab-size", o.vocab_size)->capture_default_str();
  add_split(voc);
  voc->add_option("--out", o.out, "vocabulary directory");

  auto* trn = app.add_subcommand("train", "train a model");
  add_config(trn);
  trn->add_option("--books", o.books, "annotated book directory");
  trn->add_option("--vocab", o.vocab, "vocabulary directory");
  trn->add_option("--format", o.format, "conditioned or plain")->capture_default_str();
  trn->add_option("--layers", o.layers)->capture_default_str();
  trn->add_option("--heads", o.heads)->capture_default_str();
  trn->add_option("--d-model", o.d_model)->capture_default_str();
  trn->add_option("--block-size", o.block_size)->capture_default_str();
  trn->add_option("--dropout", o.dropout)->capture_default_str();
  trn->add_option("--epochs", o.train.epochs)->capture_default_str();
  trn->add_option("--batch-size", o.train.batch_size)->capture_default_str();
  trn->add_option("--lr", o.train.optim.lr)->capture_default_str();
  trn->add_option("--weight-decay", o.train.optim.weight_decay)->capture_default_str();
  trn->add_option("--grad-clip", o.train.optim.grad_clip)->capture_default_str();
  trn->add_option("--warmup", o.train.warmup_steps)->capture_default_str();
  trn->add_option("--seed", o.train.seed)->capture_default_str();
  trn->add_option("--log", o.log, "JSON-lines log (default: <out>.log.jsonl)");
  add_split(trn);
  trn->add_option("--out", o.out, "checkpoint path");

  auto* gen = app.add_subcommand("generate", "generate a middle paragraph");
  add_config(gen);
  gen->add_option("--checkpoint", o.checkpoint, "checkpoint file");
  gen->add_option("--vocab", o.vocab, "vocabulary directory");
  gen->add_option("--context", o.context, "JSON file {p1, p3, genre, entities, summary}");
  gen->add_option("--size", o.size, "S, M or L")->capture_default_str();
  add_decode(gen);
  gen->add_option("--min-length", o.min_length, "0 = corpus p5 of the class")->capture_default_str();
  gen->add_option("--max-length", o.max_length, "0 = corpus p95 of the class")->capture_default_str();
  gen->add_option("--out", o.out, "also write the result here");

  auto* ev = app.add_subcommand("evaluate", "paired evaluation of a model against a baseline");
  add_config(ev);
  ev->add_option("--model", o.model, "checkpoint under test");
  ev->add_option("--baseline", o.baseline, "baseline checkpoint (also the reference model)");
  ev->add_option("--vocab", o.vocab, "vocabulary directory");
  ev->add_option("--eval-set", o.eval_set, "annotated book directory");
  ev->add_option("--summarizer", o.summarizer, "kw, sentence or none")->capture_default_str();
  ev->add_option("--max-samples", o.max_samples, "0 = all")->capture_default_str();
  add_split(ev);
  add_decode(ev);
  ev->add_option("--out", o.out, "report JSON path");

  auto* srv = app.add_subcommand("serve", "run the HTTP service");
  add_config(srv);
  srv->add_option("--role", o.role, "all, master, ner or generate")->capture_default_str();
  srv->add_option("--bind", o.bind, "host:port (default BIND_ADDR or 127.0.0.1:8080)");
  srv->add_option("--checkpoint", o.checkpoint, "checkpoint (default MODEL_PATH)");
  srv->add_option("--vocab", o.vocab, "vocabulary directory (default VOCAB_PATH)");
  srv->add_option("--gazetteer", o.gazetteer, "gazetteer (default GAZETTEER_PATH)")->capture_default_str();
  srv->add_option("--nodes", o.nodes, "nodes file (default NODES_FILE)");
  srv->add_option("--static-dir", o.static_dir, "static assets served at /");

  try {
    std::vector<std::string> args(argv, argv + argc);
    args = expand_config(args, app);
    std::vector<char*> cargs;
    for (auto& a : args) cargs.push_back(a.data());
    app.parse(static_cast<int>(cargs.size()), cargs.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*pre) return cmd_preprocess(o, *pre);
    if (*ann) return cmd_annotate(o, *ann);
    if (*voc) return cmd_build_vocab(o, *voc);
    if (*trn) return cmd_train(o, *trn);
    if (*gen) return cmd_generate(o, *gen);
    if (*ev) return cmd_evaluate(o, *ev);
    if (*srv) return cmd_serve(o, *srv);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 3;
  }
  return 1;
}

#include "parafill/pipeline.hpp"

#include <algorithm>
#include <cmath>

#include "parafill/hash.hpp"
#include "parafill/text.hpp"

namespace parafill::pipeline {

namespace fs = std::filesystem;

PreprocessResult preprocess(const fs::path& raw_dir, const fs::path& sidecar, const corpus::GenreMap& genres,
                            const corpus::SplitConfig& split) {
  PreprocessResult out;
  for (const auto& meta : corpus::load_sidecar(sidecar)) {
    const std::string id = fs::path(meta.path).stem().string();
    corpus::Book book;
    try {
      book = corpus::parse_book(read_file(raw_dir / meta.path), meta);
    } catch (const DataError& e) {
      out.warnings.push_back(id + ": skipped: " + e.what());
      continue;
    }
    if (!corpus::is_english(book.metadata.language)) {
      out.warnings.push_back(id + ": skipped: language " + book.metadata.language);
      continue;
    }
    book.metadata.genre = corpus::map_genre(book.metadata.theme, genres);
    if (!book.metadata.genre) {
      out.warnings.push_back(id + ": skipped: no genre for its subject tags");
      continue;
    }
    auto result = corpus::split_paragraphs(book.text, split);
    for (const auto& w : result.warnings) out.warnings.push_back(id + ": " + w);
    if (result.paragraphs.empty()) {
      out.warnings.push_back(id + ": skipped: no paragraphs");
      continue;
    }
    book.paragraphs = std::move(result.paragraphs);
    out.books.push_back({id, std::move(book)});
  }
  std::sort(out.books.begin(), out.books.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return out;
}

void write_books(const fs::path& dir, const std::vector<NamedBook>& books) {
  fs::create_directories(dir);
  for (const auto& b : books) write_file_atomic(dir / (b.id + ".json"), nlohmann::json(b.book).dump(1) + "\n");
}

std::vector<NamedBook> read_books(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() == ".json" && entry.path().filename() != "config.json") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<NamedBook> out;
  for (const auto& f : files) {
    try {
      out.push_back({f.stem().string(), nlohmann::json::parse(read_file(f)).get<corpus::Book>()});
    } catch (const nlohmann::json::exception& e) {
      throw DataError(f.string() + ": " + e.what());
    }
  }
  if (out.empty()) throw DataError("no book files in " + dir.string());
  return out;
}

void annotate_books(std::vector<NamedBook>& books, const annotate::Gazetteer& gazetteer,
                    const annotate::AnnotateConfig& config) {
  for (auto& b : books) annotate::annotate_book(b.book, gazetteer, config);
}

DataSplit split_triples(const std::vector<NamedBook>& books, double eval_fraction) {
  if (eval_fraction < 0.0 || eval_fraction >= 1.0) throw UsageError("eval fraction must be in [0, 1)");
  DataSplit out;
  for (std::size_t b = 0; b < books.size(); ++b) {
    const std::size_t n = books[b].book.paragraphs.size();
    const auto n_eval = static_cast<std::size_t>(std::ceil(static_cast<double>(n) * eval_fraction));
    const std::size_t cut = n - std::min(n, n_eval);
    for (std::size_t i = 0; i < cut; ++i) out.train.push_back({b, i, 0, cut});
    for (std::size_t i = cut + 1; i + 1 < n; ++i) out.eval.push_back({b, i, cut, n});
  }
  return out;
}

namespace {

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (const auto& s : items) {
    if (!out.empty()) out += ", ";
    out += s;
  }
  return out;
}

model::Sequence as_sequence(const assembly::TrainingSample& s) {
  return {std::span(s.ids).first(s.attention_len), std::span(s.segments).first(s.attention_len)};
}

}  // namespace

std::vector<EncodedBook> encode_books(const std::vector<NamedBook>& books, const tokenizer::Vocab& vocab) {
  std::vector<EncodedBook> out;
  out.reserve(books.size());
  for (const auto& nb : books) {
    EncodedBook eb;
    eb.genre = vocab.encode(nb.book.metadata.genre.value_or(""));
    for (const auto& p : nb.book.paragraphs) {
      if (!p.entities || !p.summaries) throw DataError(nb.id + ": paragraph " + std::to_string(p.index) + " is not annotated");
      EncodedParagraph ep;
      ep.text = vocab.encode(p.text);
      ep.entities = vocab.encode(assembly::entities_text(*p.entities));
      ep.keywords = vocab.encode(join(p.summaries->kw));
      ep.key_sentence = vocab.encode(p.summaries->key_sentence);
      if (!ep.keywords.empty()) ep.summary_slots.push_back(ep.keywords);
      for (const auto* slot : {&p.summaries->key_sentence, &p.summaries->ext1, &p.summaries->ext2}) {
        if (!slot->empty()) ep.summary_slots.push_back(vocab.encode(*slot));
      }
      ep.size = p.size_class;
      eb.paragraphs.push_back(std::move(ep));
    }
    out.push_back(std::move(eb));
  }
  return out;
}

SummaryKind parse_summary_kind(const std::string& s) {
  if (s == "random") return SummaryKind::Random;
  if (s == "kw") return SummaryKind::Keywords;
  if (s == "sentence") return SummaryKind::KeySentence;
  if (s == "none") return SummaryKind::None;
  throw UsageError("unknown summarizer '" + s + "' (expected random, kw, sentence or none)");
}

std::string to_string(SummaryKind k) {
  switch (k) {
    case SummaryKind::Random: return "random";
    case SummaryKind::Keywords: return "kw";
    case SummaryKind::KeySentence: return "sentence";
    case SummaryKind::None: return "none";
  }
  return "none";
}

assembly::Sections make_sections(const EncodedBook& book, const Triple& t, SummaryKind summary, std::mt19937_64* rng) {
  const auto& p = book.paragraphs.at(t.index);
  assembly::Sections s;
  s.p2 = p.text;
  if (t.index > t.lo) s.p1 = book.paragraphs[t.index - 1].text;
  if (t.index + 1 < t.hi) s.p3 = book.paragraphs[t.index + 1].text;
  s.theme = book.genre;
  s.entities = p.entities;
  s.size = p.size;
  switch (summary) {
    case SummaryKind::Random:
      if (rng == nullptr) throw UsageError("random summary needs an rng");
      if (!p.summary_slots.empty()) s.summary = p.summary_slots[static_cast<std::size_t>((*rng)() % p.summary_slots.size())];
      break;
    case SummaryKind::Keywords: s.summary = p.keywords; break;
    case SummaryKind::KeySentence: s.summary = p.key_sentence; break;
    case SummaryKind::None: break;
  }
  return s;
}

std::string to_string(assembly::Format f) { return f == assembly::Format::Plain ? "plain" : "conditioned"; }

assembly::Format parse_format(const std::string& s) {
  if (s == "conditioned") return assembly::Format::Conditioned;
  if (s == "plain") return assembly::Format::Plain;
  throw UsageError("unknown format '" + s + "' (expected conditioned or plain)");
}

tokenizer::Vocab build_vocab(const std::vector<NamedBook>& books, const tokenizer::TrainConfig& config) {
  std::vector<std::string> texts;
  for (const auto& b : books) {
    for (const auto& p : b.book.paragraphs) texts.push_back(p.text);
  }
  return tokenizer::train_bpe(texts, config);
}

assembly::LengthStats length_stats(const std::vector<EncodedBook>& books, const std::vector<Triple>& train) {
  std::vector<std::size_t> all;
  std::vector<std::size_t> by_class[3];
  for (const auto& t : train) {
    const auto& p = books.at(t.book).paragraphs.at(t.index);
    all.push_back(p.text.size());
    by_class[static_cast<int>(p.size)].push_back(p.text.size());
  }
  if (all.empty()) throw DataError("no training paragraphs for length statistics");
  auto range = [&](std::vector<std::size_t>& v) {
    auto& src = v.empty() ? all : v;
    return assembly::LengthStats::Range{assembly::percentile(src, 5), assembly::percentile(src, 95)};
  };
  return {range(by_class[0]), range(by_class[1]), range(by_class[2])};
}

std::vector<assembly::TrainingSample> training_samples(const std::vector<EncodedBook>& books,
                                                      const std::vector<Triple>& train_set, const tokenizer::Vocab& vocab,
                                                      std::size_t block_size, assembly::Format format, std::uint64_t seed,
                                                      std::size_t epoch, std::size_t* dropped) {
  std::vector<assembly::TrainingSample> samples;
  for (const auto& t : train_set) {
    auto rng = assembly::sample_rng(seed, t.book, t.index, epoch);
    try {
      samples.push_back(assembly::build_training_sample(make_sections(books.at(t.book), t, SummaryKind::Random, &rng),
                                                        vocab, block_size, format));
    } catch (const DataError&) {
      if (dropped != nullptr) ++*dropped;
    }
  }
  return samples;
}

double probe_loss(const model::Transformer<float>& m, const std::vector<assembly::TrainingSample>& samples) {
  if (samples.empty()) throw DataError("no samples to probe");
  const std::size_t probes = std::min<std::size_t>(64, samples.size());
  double nll = 0.0;
  std::size_t count = 0;
  for (std::size_t k = 0; k < probes; ++k) {
    const auto& s = samples[k * samples.size() / probes];
    auto r = m.loss(as_sequence(s), std::span(s.loss_mask).first(s.attention_len));
    nll += r.nll;
    count += r.count;
  }
  return nll / static_cast<double>(count);
}

TrainOutcome train_model(model::Transformer<float>& model, const std::vector<EncodedBook>& books,
                         const std::vector<Triple>& train_set, const tokenizer::Vocab& vocab, assembly::Format format,
                         const train::TrainConfig& cfg, std::ostream* log) {
  if (static_cast<std::size_t>(model.config().vocab_size) != vocab.size())
    throw UsageError("model vocab_size " + std::to_string(model.config().vocab_size) + " does not match vocabulary size " +
                     std::to_string(vocab.size()));
  model.init(cfg.seed);
  const auto block = static_cast<std::size_t>(model.config().block_size);
  TrainOutcome out;
  auto build = [&](std::size_t epoch, std::size_t* dropped) {
    return training_samples(books, train_set, vocab, block, format, cfg.seed, epoch, dropped);
  };
  auto first = build(0, &out.dropped);
  if (first.empty()) throw DataError("no training samples fit the block");
  out.samples_per_epoch = first.size();
  out.initial_loss = probe_loss(model, first);
  train::EpochSamples samples = [&](std::size_t epoch) {
    return epoch == 0 ? std::move(first) : build(epoch, nullptr);
  };
  out.summary = train::train(model, samples, out.samples_per_epoch, cfg, log);
  out.final_loss = probe_loss(model, build(0, nullptr));
  return out;
}

decode::DecodeParams with_length_bounds(decode::DecodeParams p, const assembly::LengthStats& stats, SizeClass size,
                                        LengthPolicy policy) {
  const auto r = policy == LengthPolicy::PerClass ? stats.of(size) : stats.any();
  p.min_length = r.p5;
  p.max_length = std::max<std::size_t>({r.p95, r.p5, 1});
  return p;
}

decode::GenerationResult generate_p2(const model::Transformer<float>& model, assembly::Format format,
                                     const assembly::Sections& sections, const tokenizer::Vocab& vocab,
                                     const decode::DecodeParams& params) {
  params.validate();
  const auto prefix = assembly::build_generation_prefix(sections, vocab, static_cast<std::size_t>(model.config().block_size),
                                                        params.max_length, format);
  decode::TransformerLM lm(model, static_cast<std::uint8_t>(assembly::Segment::P2));
  return decode::generate(lm, prefix.ids, prefix.segments, params, decode::p2_rules(vocab), &vocab);
}

namespace {

double reference_perplexity(const model::Transformer<float>& reference, const assembly::Sections& sections,
                            const decode::GenerationResult& gen, const tokenizer::Vocab& vocab) {
  tokenizer::TokenSeq scored = gen.ids;
  if (gen.stop_reason == decode::StopReason::Eos) scored.push_back(vocab.special(tokenizer::Special::Eos));
  if (scored.empty()) return std::nan("");
  if (assembly::fixed_length(sections, assembly::Format::Plain) + scored.size() >
      static_cast<std::size_t>(reference.config().block_size)) {
    return std::nan("");
  }
  const auto prefix = assembly::build_generation_prefix(
      sections, vocab, static_cast<std::size_t>(reference.config().block_size), scored.size(), assembly::Format::Plain);
  tokenizer::TokenSeq ids = prefix.ids;
  std::vector<std::uint8_t> segments = prefix.segments;
  std::vector<std::uint8_t> mask(ids.size(), 0);
  for (auto id : scored) {
    ids.push_back(id);
    segments.push_back(static_cast<std::uint8_t>(assembly::Segment::P2));
    mask.push_back(1);
  }
  return metrics::perplexity(reference, {ids, segments}, mask);
}

metrics::SampleMetrics score(const std::string& id, const corpus::Paragraph& truth, const decode::GenerationResult& gen,
                             double perplexity, const model::Transformer<float>& reference,
                             const tokenizer::Vocab& vocab) {
  metrics::SampleMetrics m;
  m.sample_id = id;
  m.text = gen.text;
  m.stop_reason = decode::to_string(gen.stop_reason);
  m.requested_size = std::string(to_string(truth.size_class));
  const auto cand = text::normalized_words(gen.text);
  const auto ref = text::normalized_words(truth.text);
  m.bleu = metrics::bleu(cand, {ref});
  m.rouge1_f = metrics::rouge_n(cand, ref, 1).f1;
  m.rouge2_f = metrics::rouge_n(cand, ref, 2).f1;
  m.entities_count = metrics::entities_count(truth.entities.value_or(EntitySet{}), gen.text);
  m.kw_count = metrics::kw_count(truth.summaries ? truth.summaries->kw : std::vector<std::string>{}, gen.text);
  m.size_ok = metrics::size_conformance(truth.size_class, gen.text);
  m.generated_chars = text::utf8_length(gen.text);
  m.emb_sim = metrics::embedding_similarity(reference, vocab, gen.text, truth.text);
  m.perplexity = perplexity;
  return m;
}

}  // namespace

std::pair<metrics::MetricReport, metrics::MetricReport> evaluate_run(
    const EvalModel& under_test, const EvalModel& baseline, const model::Transformer<float>& reference,
    const std::vector<NamedBook>& books, const std::vector<EncodedBook>& encoded, const std::vector<Triple>& eval_set,
    const tokenizer::Vocab& vocab, const assembly::LengthStats& stats, const EvalConfig& cfg, std::ostream* progress) {
  if (eval_set.empty()) throw DataError("empty eval set");
  const std::size_t n = cfg.max_samples == 0 ? eval_set.size() : std::min(cfg.max_samples, eval_set.size());
  std::pair<metrics::MetricReport, metrics::MetricReport> out;
  auto condition = [&](const EvalModel& m) {
    nlohmann::json j{{"model_id", m.id},
                     {"format", to_string(m.format)},
                     {"decode_params", cfg.decode},
                     {"summarizer_kind", to_string(cfg.summary)},
                     {"length_policy", cfg.lengths == LengthPolicy::PerClass ? "per-class" : "any-class"},
                     {"seed", cfg.seed}};
    return j;
  };
  out.first.condition = condition(under_test);
  out.second.condition = condition(baseline);
  for (std::size_t k = 0; k < n; ++k) {
    const auto& t = eval_set[k];
    const auto& truth = books.at(t.book).book.paragraphs.at(t.index);
    const auto sections = make_sections(encoded.at(t.book), t, cfg.summary, nullptr);
    auto params = with_length_bounds(cfg.decode, stats, truth.size_class, cfg.lengths);
    params.seed = cfg.seed + k;
    const std::string id = books[t.book].id + ":" + std::to_string(truth.index);
    for (auto [m, report] : {std::pair{&under_test, &out.first}, std::pair{&baseline, &out.second}}) {
      // Long classes can outgrow a small block; cap the budget at the room left
      // instead of dropping the sample, which would bias the pairing.
      auto capped = params;
      const auto block = static_cast<std::size_t>(m->model->config().block_size);
      const auto fixed = assembly::fixed_length(sections, m->format);
      if (fixed < block) {
        capped.max_length = std::min(capped.max_length, block - fixed);
        capped.min_length = std::min(capped.min_length, capped.max_length);
      }
      const auto gen = generate_p2(*m->model, m->format, sections, vocab, capped);
      report->per_sample.push_back(
          score(id, truth, gen, reference_perplexity(reference, sections, gen, vocab), reference, vocab));
    }
    if (progress != nullptr && ((k + 1) % 20 == 0 || k + 1 == n)) *progress << "evaluated " << k + 1 << "/" << n << std::endl;
  }
  return out;
}

metrics::BootstrapCi paired_difference(const metrics::MetricReport& a, const metrics::MetricReport& b,
                                       const std::string& metric, std::size_t resamples, std::uint64_t seed) {
  const auto xa = a.column(metric, false);
  const auto xb = b.column(metric, false);
  if (xa.size() != xb.size()) throw UsageError("reports are not paired");
  std::vector<double> diffs;
  for (std::size_t i = 0; i < xa.size(); ++i) {
    if (!std::isnan(xa[i]) && !std::isnan(xb[i])) diffs.push_back(xa[i] - xb[i]);
  }
  return metrics::bootstrap_mean(diffs, resamples, seed);
}

nlohmann::json checkpoint_meta(assembly::Format format, const assembly::LengthStats& stats) {
  return {{"format", to_string(format)}, {"length_stats", stats}};
}

Engine load_engine(const fs::path& checkpoint_path, const fs::path& vocab_dir) {
  auto vocab = tokenizer::Vocab::load(vocab_dir);
  auto ckpt = checkpoint::load(checkpoint_path, vocab.hash());
  Engine e{ckpt.to_model(), std::move(vocab), assembly::Format::Conditioned, {}, {}, {}};
  e.format = parse_format(ckpt.meta.value("format", std::string("conditioned")));
  if (ckpt.meta.contains("length_stats")) e.lengths = ckpt.meta.at("length_stats").get<assembly::LengthStats>();
  e.model_checksum = sha256_file(checkpoint_path);
  e.vocab_checksum = e.vocab.hash();
  return e;
}

assembly::Sections request_sections(const Engine& engine, const Request& r) {
  assembly::Sections s;
  s.p1 = engine.vocab.encode(r.p1);
  s.p3 = engine.vocab.encode(r.p3);
  s.theme = engine.vocab.encode(r.genre);
  s.entities = engine.vocab.encode(assembly::entities_text(r.entities));
  s.summary = engine.vocab.encode(r.summary);
  s.size = r.size;
  return s;
}

}  // namespace parafill::pipeline

#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "parafill/annotate.hpp"
#include "parafill/assembly.hpp"
#include "parafill/checkpoint.hpp"
#include "parafill/corpus.hpp"
#include "parafill/decode.hpp"
#include "parafill/metrics.hpp"
#include "parafill/model.hpp"
#include "parafill/tokenizer.hpp"
#include "parafill/train.hpp"

namespace parafill::pipeline {

struct NamedBook {
  std::string id;  // file stem of the source text
  corpus::Book book;
};

struct PreprocessResult {
  std::vector<NamedBook> books;
  std::vector<std::string> warnings;  // "<id>: <message>"
};

/// Parses every sidecar entry under `raw_dir`, assigns genres, drops
/// non-English or genre-less books (with a warning) and splits paragraphs.
PreprocessResult preprocess(const std::filesystem::path& raw_dir, const std::filesystem::path& sidecar,
                            const corpus::GenreMap& genres, const corpus::SplitConfig& split = {});

/// One JSON file per book, named "<id>.json", sorted by id on read.
void write_books(const std::filesystem::path& dir, const std::vector<NamedBook>& books);
std::vector<NamedBook> read_books(const std::filesystem::path& dir);

void annotate_books(std::vector<NamedBook>& books, const annotate::Gazetteer& gazetteer,
                    const annotate::AnnotateConfig& config = {});

/// Paragraph `index` of book `book`, with the neighbours usable as P1/P3
/// restricted to [lo, hi).
struct Triple {
  std::size_t book = 0;
  std::size_t index = 0;
  std::size_t lo = 0;
  std::size_t hi = 0;
};

/// The last `eval_fraction` of every book is held out. Training covers every
/// paragraph before the cut; evaluation covers the interior of the held-out
/// tail so each evaluated paragraph has both neighbours.
struct DataSplit {
  std::vector<Triple> train;
  std::vector<Triple> eval;
};
DataSplit split_triples(const std::vector<NamedBook>& books, double eval_fraction = 0.12);

/// Token ids of everything a sample can need, encoded once.
struct EncodedParagraph {
  tokenizer::TokenSeq text;
  tokenizer::TokenSeq entities;
  tokenizer::TokenSeq keywords;
  tokenizer::TokenSeq key_sentence;
  std::vector<tokenizer::TokenSeq> summary_slots;  // in the order choose_summary sees them
  SizeClass size = SizeClass::S;
};

struct EncodedBook {
  tokenizer::TokenSeq genre;
  std::vector<EncodedParagraph> paragraphs;
};

/// Throws DataError when a paragraph has no annotations.
std::vector<EncodedBook> encode_books(const std::vector<NamedBook>& books, const tokenizer::Vocab& vocab);

enum class SummaryKind { Random, Keywords, KeySentence, None };
SummaryKind parse_summary_kind(const std::string& s);
std::string to_string(SummaryKind k);

/// Sections of one triple. `Random` picks a non-empty summary slot with `rng`.
assembly::Sections make_sections(const EncodedBook& book, const Triple& t, SummaryKind summary, std::mt19937_64* rng);

std::string to_string(assembly::Format f);
assembly::Format parse_format(const std::string& s);

/// Trains BPE over every paragraph text.
tokenizer::Vocab build_vocab(const std::vector<NamedBook>& books, const tokenizer::TrainConfig& config);

/// p5/p95 of P2 token lengths per size class over the training triples.
assembly::LengthStats length_stats(const std::vector<EncodedBook>& books, const std::vector<Triple>& train);

/// Training samples of one epoch; the summary slot of each triple is drawn
/// from (seed, book, paragraph, epoch). Samples that do not fit are counted in
/// `dropped`.
std::vector<assembly::TrainingSample> training_samples(const std::vector<EncodedBook>& books,
                                                      const std::vector<Triple>& train_set, const tokenizer::Vocab& vocab,
                                                      std::size_t block_size, assembly::Format format, std::uint64_t seed,
                                                      std::size_t epoch, std::size_t* dropped = nullptr);

/// Mean masked NLL (no dropout) over up to 64 evenly spaced samples.
double probe_loss(const model::Transformer<float>& m, const std::vector<assembly::TrainingSample>& samples);

struct TrainOutcome {
  train::TrainSummary summary;
  std::size_t samples_per_epoch = 0;
  std::size_t dropped = 0;
  // Mean masked NLL (no dropout) on up to 64 epoch-0 samples, before and
  // after training.
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

/// Initializes from cfg.seed and trains on freshly assembled samples every
/// epoch (summary slot resampled per epoch from (seed, book, paragraph,
/// epoch)).
TrainOutcome train_model(model::Transformer<float>& model, const std::vector<EncodedBook>& books,
                         const std::vector<Triple>& train_set, const tokenizer::Vocab& vocab, assembly::Format format,
                         const train::TrainConfig& cfg, std::ostream* log = nullptr);

/// How min/max generation length are derived from corpus statistics.
/// `PerClass` uses the requested class's p5/p95; `AnyClass` uses the same
/// class-independent bounds for every request so the size token alone has to
/// steer the length.
enum class LengthPolicy { PerClass, AnyClass };

decode::DecodeParams with_length_bounds(decode::DecodeParams p, const assembly::LengthStats& stats, SizeClass size,
                                        LengthPolicy policy);

/// Generates P2 for `sections` under `model`.
decode::GenerationResult generate_p2(const model::Transformer<float>& model, assembly::Format format,
                                     const assembly::Sections& sections, const tokenizer::Vocab& vocab,
                                     const decode::DecodeParams& params);

struct EvalConfig {
  decode::DecodeParams decode;
  SummaryKind summary = SummaryKind::Keywords;
  LengthPolicy lengths = LengthPolicy::AnyClass;
  std::size_t max_samples = 0;  // 0 = all
  std::uint64_t seed = 0;       // sample k decodes with seed + k under both models
};

struct EvalModel {
  const model::Transformer<float>* model = nullptr;
  assembly::Format format = assembly::Format::Conditioned;
  std::string id;
};

/// Generates P2 for every eval triple under both models from identically
/// seeded decoders and scores each output against the true P2. Perplexity
/// and embeddings come from `reference` (run with the Plain layout).
/// Throws DataError on an empty eval set.
std::pair<metrics::MetricReport, metrics::MetricReport> evaluate_run(
    const EvalModel& under_test, const EvalModel& baseline, const model::Transformer<float>& reference,
    const std::vector<NamedBook>& books, const std::vector<EncodedBook>& encoded, const std::vector<Triple>& eval_set,
    const tokenizer::Vocab& vocab, const assembly::LengthStats& stats, const EvalConfig& cfg,
    std::ostream* progress = nullptr);

/// Paired comparison of two reports on one metric: bootstrap of (a - b).
metrics::BootstrapCi paired_difference(const metrics::MetricReport& a, const metrics::MetricReport& b,
                                       const std::string& metric, std::size_t resamples = 10000,
                                       std::uint64_t seed = 0);

/// Everything needed to serve or run generation from a checkpoint.
struct Engine {
  model::Transformer<float> model;
  tokenizer::Vocab vocab;
  assembly::Format format = assembly::Format::Conditioned;
  assembly::LengthStats lengths;
  std::string model_checksum;  // SHA-256 of the checkpoint file
  std::string vocab_checksum;  // Vocab::hash()
};

/// Reads the checkpoint meta {format, length_stats}; the vocabulary must
/// match the checkpoint's vocab hash.
Engine load_engine(const std::filesystem::path& checkpoint_path, const std::filesystem::path& vocab_dir);

nlohmann::json checkpoint_meta(assembly::Format format, const assembly::LengthStats& stats);

/// Free-text conditioning as a user supplies it.
struct Request {
  std::string p1;
  std::string p3;
  std::string genre;
  SizeClass size = SizeClass::M;
  EntitySet entities;
  std::string summary;
};

assembly::Sections request_sections(const Engine& engine, const Request& r);

}  // namespace parafill::pipeline

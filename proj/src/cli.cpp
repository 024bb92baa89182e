#include "nv/cli.hpp"

#include <cstdlib>

#include "CLI11.hpp"
#include "json.hpp"
#include "nv/checkpoint.hpp"
#include "nv/corpus.hpp"
#include "nv/error.hpp"
#include "nv/evaluate.hpp"
#include "nv/inference.hpp"
#include "nv/service.hpp"
#include "nv/trainer.hpp"

namespace nv {

namespace {

using json = nlohmann::json;

void print_error(std::ostream& err, std::string_view code, const std::string& message) {
  err << json{{"error", {{"code", code}, {"message", message}}}}.dump() << '\n';
}

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

DecodeOptions decode_options(std::size_t beam) {
  DecodeOptions opts;
  if (beam > 0) {
    opts.strategy = DecodeStrategy::Beam;
    opts.beam_width = beam;
  }
  return opts;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"newvision: multimodal scene model and assistive device simulator", "newvision"};
  app.require_subcommand(1);

  std::string out_dir, stage, config, ckpt, split, corpus = ".", metrics, image, question, world,
      static_dir;
  std::size_t n_train = 64, n_eval = 16, beam = 0;
  std::uint64_t seed = 0;
  int port = 8080;

  auto* gen = app.add_subcommand("gen-data", "render a synthetic scene corpus");
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--train", n_train, "training scenes");
  gen->add_option("--eval", n_eval, "evaluation scenes");
  gen->add_option("--seed", seed, "corpus seed");

  auto* train_cmd = app.add_subcommand("train", "run one training stage");
  train_cmd->add_option("--stage", stage, "pretrain, finetune-caption, finetune-vqa, finetune-nlvr or distill");
  train_cmd->add_option("--config", config, "JSON training config")->required();

  auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint on a corpus split");
  eval_cmd->add_option("--ckpt", ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--split", split, "train or eval")->required();
  eval_cmd->add_option("--corpus", corpus, "corpus directory");
  eval_cmd->add_option("--metrics", metrics, "comma-separated metric names");
  eval_cmd->add_option("--beam", beam, "beam width for generation (0 = greedy)");

  auto* caption_cmd = app.add_subcommand("caption", "caption a PPM image");
  caption_cmd->add_option("--ckpt", ckpt, "checkpoint file")->required();
  caption_cmd->add_option("--image", image, "PPM image")->required();
  caption_cmd->add_option("--beam", beam, "beam width (0 = greedy)");

  auto* vqa_cmd = app.add_subcommand("vqa", "answer a question about a PPM image");
  vqa_cmd->add_option("--ckpt", ckpt, "checkpoint file")->required();
  vqa_cmd->add_option("--image", image, "PPM image")->required();
  vqa_cmd->add_option("--question", question, "question text")->required();
  vqa_cmd->add_option("--beam", beam, "beam width (0 = greedy)");

  auto* serve_cmd = app.add_subcommand("serve", "run the HTTP API");
  serve_cmd->add_option("--ckpt", ckpt, "checkpoint file")->required();
  serve_cmd->add_option("--world", world, "grid world JSON")->required();
  serve_cmd->add_option("--port", port, "listen port (NEWVISION_PORT overrides)");
  serve_cmd->add_option("--static", static_dir, "directory served at /");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    print_error(err, "UsageError", e.what());
    return 2;
  }

  try {
    if (gen->parsed()) {
      build_corpus(out_dir, n_train, n_eval, seed);
      out << json{{"out", out_dir},
                  {"train", n_train},
                  {"eval", n_eval},
                  {"seed", seed},
                  {"fingerprint", corpus_fingerprint(out_dir)}}
                 .dump()
          << '\n';
    } else if (train_cmd->parsed()) {
      auto cfg = TrainConfig::load(config);
      if (!stage.empty()) {
        try {
          cfg.stage = parse_stage(stage);
        } catch (const Error& e) {
          throw UsageError("--stage: " + std::string(e.what()));
        }
      }
      const auto result = train(cfg);
      json last = json::object();
      if (!result.log.empty()) last = json::parse(to_json_line(result.log.back(), cfg.stage));
      out << json{{"stage", to_string(cfg.stage)},
                  {"steps", result.log.size()},
                  {"checkpoint", cfg.output_checkpoint.string()},
                  {"final", last}}
                 .dump()
          << '\n';
    } else if (eval_cmd->parsed()) {
      EvalOptions opts;
      opts.decode = decode_options(beam);
      for (std::size_t start = 0; start < metrics.size();) {
        const auto comma = std::min(metrics.find(',', start), metrics.size());
        const auto name = metrics.substr(start, comma - start);
        try {
          opts.metrics.push_back(parse_metric(name));
        } catch (const Error& e) {
          throw UsageError("--metrics: " + std::string(e.what()));
        }
        start = comma + 1;
      }
      const auto ck = load_checkpoint(ckpt);
      const auto scores = evaluate(ck, load_split(corpus, split), opts);
      out << json(scores).dump() << '\n';
    } else if (caption_cmd->parsed()) {
      const auto ck = load_checkpoint(ckpt);
      out << json{{"caption", caption_image(read_ppm(image), ck, decode_options(beam))}}.dump() << '\n';
    } else if (vqa_cmd->parsed()) {
      const auto ck = load_checkpoint(ckpt);
      out << json{{"answer", answer_question(read_ppm(image), question, ck, decode_options(beam))}}.dump()
          << '\n';
    } else if (serve_cmd->parsed()) {
      if (const char* env = std::getenv("NEWVISION_PORT")) {
        try {
          port = std::stoi(env);
        } catch (const std::exception&) {
          throw UsageError("NEWVISION_PORT must be a port number");
        }
      }
      Service service(load_checkpoint(ckpt), GridWorld::load(world));
      ServeOptions opts;
      opts.port = port;
      opts.static_dir = static_dir;
      err << json{{"listening", opts.host + ":" + std::to_string(port)}}.dump() << std::endl;
      run_server(service, opts);
    }
  } catch (const UsageError& e) {
    print_error(err, "UsageError", e.what());
    return 2;
  } catch (const Error& e) {
    print_error(err, to_string(e.code()), e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error(err, "Internal", e.what());
    return 1;
  }
  return 0;
}

}  // namespace nv

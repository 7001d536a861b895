#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "apiq/calib/quantize.hpp"
#include "apiq/cli/run_config.hpp"
#include "apiq/eval/eval.hpp"
#include "apiq/model/checkpoint.hpp"
#include "apiq/train/corpus.hpp"
#include "apiq/train/train.hpp"

using namespace apiq;

namespace {

cli::RunConfig load_config(const std::string& path)
{
    return path.empty() ? cli::RunConfig() : cli::RunConfig::load(path);
}

std::string real_text(double v) { return cli::canonical_real(v); }

model::TinyTransformer<float> load_checkpoint(const std::string& path)
{
    if (!std::filesystem::exists(path)) throw InputError("checkpoint not found: " + path);
    return model::load_model(path);
}

int cmd_pretrain(const std::string& config, const std::string& corpus_path, const std::string& out)
{
    const auto rc = load_config(config);
    const auto mc = rc.model_config();
    const auto pc = rc.pretrain_config();
    const auto chunk = rc.count("eval.chunk_len");
    const auto log_every = std::max<std::size_t>(1, rc.count("pretrain.log_every"));
    if (pc.seq_len == 0 || pc.seq_len > mc.max_seq) throw ConfigError("pretrain.seq_len must be in [1, model.max_seq]");
    std::cout << "config\t" << rc.canonical() << '\n';

    const auto corpus = train::Corpus::load(corpus_path);
    if (corpus.tokens.size() < 4 * pc.seq_len)
        throw InputError("corpus has " + std::to_string(corpus.tokens.size()) + " bytes; pretraining needs at least " +
                         std::to_string(4 * pc.seq_len));
    auto m = model::init_model<float>(mc, rc.count("seed"));
    train::pretrain(m, corpus.train(), pc, [&](const train::StepLog& s) {
        if (s.step % log_every == 0 || s.step + 1 == pc.steps)
            std::cout << "step\t" << s.step << '\t' << real_text(s.lr) << '\t' << real_text(s.loss) << '\n';
    });
    model::save_model(m, out);
    std::cout << "train_ppl\t" << real_text(eval::perplexity(m, corpus.train(), chunk).ppl) << '\n';
    std::cout << "eval_ppl\t" << real_text(eval::perplexity(m, corpus.heldout(), chunk).ppl) << '\n';
    return 0;
}

struct QuantizeArgs {
    std::string config, in, out, corpus, log, method;
    int bits = -1;
    long rank = -1;
};

int cmd_quantize(const QuantizeArgs& a)
{
    auto rc = load_config(a.config);
    if (!a.method.empty()) rc.set("calib.method", a.method);
    if (a.bits >= 0) rc.set("quant.bits", std::to_string(a.bits));
    if (a.rank >= 0) rc.set("lora.rank", std::to_string(a.rank));
    const auto plan = rc.calib_plan();
    std::cout << "config\t" << rc.canonical() << '\n';

    const auto fp = load_checkpoint(a.in);
    if (fp.any_quantized()) throw InputError("quantize needs a full-precision checkpoint: " + a.in);
    calib::CalibSet cs;
    if (calib::is_gradient_method(plan.method)) {
        if (a.corpus.empty()) throw ConfigError("--corpus is required for " + calib::to_string(plan.method));
        const auto seq = rc.count("calib.seq_len");
        if (seq == 0 || seq > fp.cfg.max_seq) throw ConfigError("calib.seq_len must be in [1, model.max_seq]");
        const auto corpus = train::Corpus::load(a.corpus);
        cs = calib::sample_calib(corpus.train(), rc.count("calib.samples"), seq, plan.seed);
    }

    const std::string log_path = a.log.empty() ? a.out + ".calib.tsv" : a.log;
    std::ofstream log_file(log_path, std::ios::app);
    if (!log_file) throw InputError("cannot open calibration log " + log_path);
    log_file << "config\t" << rc.canonical() << '\n' << "layer\tepoch\tloss\n";
    log_file.precision(17);
    calib::CalibLog log;
    log.sink = [&](const calib::CalibLog::Row& r) { log_file << r.layer << '\t' << r.epoch << '\t' << r.loss << '\n'; };

    auto res = calib::quantize_model(fp, cs, plan, &log);
    calib::strip_full_weights(res.model);
    model::save_model(res.model, a.out);
    std::cout << "method\t" << calib::to_string(plan.method) << '\n';
    for (const auto& l : res.layers)
        std::cout << "calib\t" << l.name << '\t' << real_text(l.stats.initial_loss) << '\t'
                  << real_text(l.stats.best_loss) << '\t' << l.stats.best_epoch << '\n';
    return 0;
}

int cmd_finetune(const std::string& config, const std::string& in, const std::string& corpus_path,
                 const std::string& position, const std::string& out)
{
    auto rc = load_config(config);
    if (!position.empty()) rc.set("finetune.lora_position", position);
    const auto fc = rc.finetune_config();
    const auto chunk = rc.count("eval.chunk_len");
    std::cout << "config\t" << rc.canonical() << '\n';

    auto m = load_checkpoint(in);
    for (const auto& blk : m.blocks)
        for (const auto& l : blk.lin)
            if (!l.quantized()) throw InputError("finetune needs a quantized checkpoint: " + in);
    const auto corpus = train::Corpus::load(corpus_path);
    std::cout << "epoch\t0\t-\t" << real_text(eval::perplexity(m, corpus.heldout(), chunk).ppl) << '\n';
    train::finetune(m, corpus.train(), fc, [&](const train::EpochLog& e) {
        std::cout << "epoch\t" << e.epoch << '\t' << real_text(e.train_loss) << '\t'
                  << real_text(eval::perplexity(m, corpus.heldout(), chunk).ppl) << '\n';
    });
    model::save_model(m, out);
    return 0;
}

struct EvalArgs {
    std::string config, in, corpus, against, hist, report_dir;
};

// Reports go to files under report_dir when given, else to stdout after a
// "report\t<name>" line.
void emit(const EvalArgs& a, const std::string& name, const std::function<void(std::ostream&)>& write)
{
    if (a.report_dir.empty()) {
        std::cout << "report\t" << name << '\n';
        write(std::cout);
        return;
    }
    const auto path = std::filesystem::path(a.report_dir) / (name + ".tsv");
    std::ofstream os(path);
    if (!os) throw InputError("cannot write report " + path.string());
    write(os);
    std::cout << "report\t" << name << '\t' << path.string() << '\n';
}

int cmd_eval(const EvalArgs& a)
{
    const auto rc = load_config(a.config);
    const auto chunk = rc.count("eval.chunk_len");
    const auto bins = rc.count("eval.hist_bins");
    std::cout << "config\t" << rc.canonical() << '\n';

    const auto m = load_checkpoint(a.in);
    const auto corpus = train::Corpus::load(a.corpus);
    const auto ppl = eval::perplexity(m, corpus.heldout(), chunk);
    std::cout << "ppl\t" << real_text(ppl.ppl) << '\n';
    if (!a.report_dir.empty()) std::filesystem::create_directories(a.report_dir);

    if (!a.against.empty()) {
        const auto full = load_checkpoint(a.against);
        if (full.any_quantized()) throw InputError("--profile-against needs a full-precision checkpoint");
        if (!(full.cfg == m.cfg)) throw InputError("the two checkpoints have different model configurations");
        const auto held = corpus.heldout();
        const auto n_seq = std::min(rc.count("eval.samples"), held.size() / chunk);
        if (n_seq == 0) throw InputError("heldout split is shorter than one profile window");
        const auto tokens = held.first(n_seq * chunk);
        const auto act = eval::activation_error_profile(full, m, tokens, n_seq);
        emit(a, "activation", [&](std::ostream& os) { act.write_tsv(os); });
        const auto w = eval::weight_error_report(full, m);
        emit(a, "weight", [&](std::ostream& os) { w.write_tsv(os); });
    }

    if (!a.hist.empty()) {
        std::vector<eval::LayerHistograms> tables;
        for (std::size_t b = 0; b < m.cfg.n_blocks; ++b)
            for (model::Proj p : model::kAllProj) {
                const auto name = model::layer_name(b, p);
                if (a.hist == "all" || a.hist == name) tables.push_back(eval::histogram_export(name, m.linear(b, p), bins));
            }
        if (tables.empty()) throw ConfigError("--hist: no layer named '" + a.hist + "'");
        emit(a, "hist", [&](std::ostream& os) { eval::write_histograms_tsv(os, tables); });
    }
    return 0;
}

int exit_code(const std::exception& e)
{
    if (dynamic_cast<const ConfigError*>(&e)) return 2;
    if (dynamic_cast<const InputError*>(&e) || dynamic_cast<const FormatError*>(&e)) return 3;
    if (dynamic_cast<const NumericError*>(&e)) return 4;
    return 1;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"apiq: quantization lab for a tiny transformer"};
    app.require_subcommand(1);

    std::string config, corpus, in, out, position;
    auto* pre = app.add_subcommand("pretrain", "train a full-precision model from scratch");
    pre->add_option("--config", config, "run configuration file");
    pre->add_option("--corpus", corpus, "UTF-8 text corpus")->required();
    pre->add_option("--out", out, "output checkpoint")->required();

    QuantizeArgs qa;
    auto* quant = app.add_subcommand("quantize", "quantize a checkpoint and initialize its adapters");
    quant->add_option("--config", qa.config, "run configuration file");
    quant->add_option("--in", qa.in, "full-precision checkpoint")->required();
    quant->add_option("--out", qa.out, "quantized checkpoint")->required();
    quant->add_option("--method", qa.method, "apiq-lw, apiq-bw, loftq, rtn or qlora");
    quant->add_option("--bits", qa.bits, "2, 3, 4 or 8");
    quant->add_option("--rank", qa.rank, "LoRA rank");
    quant->add_option("--corpus", qa.corpus, "calibration corpus (gradient methods)");
    quant->add_option("--log", qa.log, "calibration log TSV (appended; default <out>.calib.tsv)");

    auto* fine = app.add_subcommand("finetune", "train the LoRA adapters of a quantized checkpoint");
    fine->add_option("--config", config, "run configuration file");
    fine->add_option("--in", in, "quantized checkpoint")->required();
    fine->add_option("--corpus", corpus, "UTF-8 text corpus")->required();
    fine->add_option("--lora-position", position, "all, attn or ffn");
    fine->add_option("--out", out, "output checkpoint")->required();

    EvalArgs ea;
    auto* ev = app.add_subcommand("eval", "perplexity, error profiles and histograms");
    ev->add_option("--config", ea.config, "run configuration file");
    ev->add_option("--in", ea.in, "checkpoint to evaluate")->required();
    ev->add_option("--corpus", ea.corpus, "UTF-8 text corpus")->required();
    ev->add_option("--profile-against", ea.against, "full-precision checkpoint for error profiles");
    ev->add_option("--hist", ea.hist, "layer name (blocks.<b>.<proj>) or 'all'");
    ev->add_option("--report-dir", ea.report_dir, "write reports here instead of stdout");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        std::cout.precision(17);
        if (*pre) return cmd_pretrain(config, corpus, out);
        if (*quant) return cmd_quantize(qa);
        if (*fine) return cmd_finetune(config, in, corpus, position, out);
        if (*ev) return cmd_eval(ea);
    } catch (const std::exception& e) {
        std::cerr << "apiq: " << e.what() << '\n';
        return exit_code(e);
    }
    return 1;
}

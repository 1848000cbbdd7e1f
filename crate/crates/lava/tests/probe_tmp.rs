use lava::checkpoint::load_nat;
use lava::data::read_parallel;
use lava::block::RunMode;
use lava::nat::ReadoutMode;
use lava::tensor::Tape;

#[test]
#[ignore]
fn probe_va_and_heads() {
    let (nat, vocab) = load_nat(std::path::Path::new("/tmp/probe/nat_tf6.ckpt")).unwrap();
    let pairs = read_parallel(
        std::path::Path::new("/tmp/probe/heldout/source.txt"),
        std::path::Path::new("/tmp/probe/heldout/target.txt"),
        &vocab,
    )
    .unwrap();
    let v = nat.cfg.vocab_size;

    let mut att_max = 0.0;
    let mut att_own = 0.0;
    let mut left_nll = 0.0;
    let mut right_nll = 0.0;
    let mut cur_nll = 0.0;
    let mut count = 0usize;

    for pair in pairs.iter().take(50) {
        let tape = Tape::no_grad();
        let mut mode = RunMode::Eval;
        let enc = nat.encoder.encode_all_valid(&tape, &pair.source, &mut mode);
        let m = pair.target.len();
        let d_input = nat.copy_source_input(&enc, m);
        let trace = nat.decoder_forward(&tape, &d_input, &enc, &mut mode);
        // VA attention of the final application
        let w = tape.read(&nat.w_vocab);
        let att = trace.z_layers.last().unwrap().matmul_nt(&w).softmax(1);
        let att_data = att.to_vec();
        for i in 0..m {
            let row = &att_data[i * v..(i + 1) * v];
            let mx = row.iter().cloned().fold(0.0f64, f64::max);
            att_max += mx;
            att_own += row[pair.target[i]];
            count += 1;
        }
        let out = nat.look_around_readout(
            &tape,
            &trace.z_final,
            &mut ReadoutMode::Infer,
        );
        let lp_cur = out.cur_logits.log_softmax(1).to_vec();
        let lp_l = out.left_logits.as_ref().unwrap().log_softmax(1).to_vec();
        let lp_r = out.right_logits.as_ref().unwrap().log_softmax(1).to_vec();
        for i in 0..m {
            cur_nll -= lp_cur[i * v + pair.target[i]];
            let lt = if i == 0 { lava::data::BOS } else { pair.target[i - 1] };
            let rt = if i == m - 1 { lava::data::EOS } else { pair.target[i + 1] };
            left_nll -= lp_l[i * v + lt];
            right_nll -= lp_r[i * v + rt];
        }
    }
    let n = count as f64;
    println!("positions: {count}");
    println!("VA attention: mean max {:.4}, mean mass on own token {:.4}", att_max / n, att_own / n);
    println!("per-token NLL: current {:.4}, left {:.4}, right {:.4} (uniform = {:.4})",
        cur_nll / n, left_nll / n, right_nll / n, (v as f64).ln());
    }
